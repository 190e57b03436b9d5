"""Shared fixtures: one procedurally generated slab asset reused by every module.

The expensive capture fits are session fixtures so the acceptance tests and the
unit tests share a single run of each solve.
"""

import numpy as np
import pytest

from musclecap import assets
from musclecap.anatomy import precompute_basis
from musclecap.capture import (
    BlendshapeDeformer,
    SimulationDeformer,
    fit_geometry,
    fit_image,
    fit_lighting,
)
from musclecap.geometry import assemble_laplacian
from musclecap.imaging import SHLighting
from musclecap.quasistatic import FleshSystem, SolveSettings
from musclecap.rig import euler_xyz, evaluate_surface


def tight_settings():
    # FD probes of equilibria need solver noise well below the probe step.
    return SolveSettings(tolerance_scale=1e-10, max_iterations=80)


@pytest.fixture(scope="session")
def asset():
    return assets.generate()


@pytest.fixture(scope="session")
def laplacian(asset):
    mesh = asset.mesh
    constrained = np.concatenate([mesh.boundary_vertices, mesh.inner_boundary])
    return assemble_laplacian(mesh, constrained)


@pytest.fixture(scope="session")
def basis(asset, laplacian):
    return precompute_basis(asset.mesh, laplacian, asset.rig, asset.muscles)


@pytest.fixture(scope="session")
def system(asset, basis):
    return FleshSystem(
        mesh=asset.mesh,
        jaw=asset.rig.jaw,
        muscles=asset.muscles,
        basis=basis,
        proxies=asset.proxies,
    )


@pytest.fixture(scope="session")
def bbox_diag(asset):
    verts = asset.mesh.vertices
    return float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))


@pytest.fixture(scope="session")
def sim_roundtrip(asset, system):
    """Simulation-deformer geometry fits: posed round trip and rigid-only recovery."""
    truth = asset.truth
    deformer = SimulationDeformer(system)
    posed, _ = deformer.evaluate(truth.w_geometry)
    rot = euler_xyz(truth.theta)
    target = posed @ rot.T + truth.t
    fit = fit_geometry(target, SimulationDeformer(system))

    rest, _ = SimulationDeformer(system).evaluate(np.zeros(12))
    rigid_target = rest @ rot.T + truth.t
    rigid_fit = fit_geometry(rigid_target, SimulationDeformer(system))
    return {"target": target, "fit": fit, "rigid_fit": rigid_fit}


@pytest.fixture(scope="session")
def pucker_fits(asset, system, basis):
    """Pucker target fitted with both deformers, volume reports attached."""
    truth = asset.truth
    target = evaluate_surface(asset.rig, truth.w_pucker)
    sim = fit_geometry(target, SimulationDeformer(system, lip_tets=asset.lip_tets),
                       optimize_rigid=False)
    bs_deformer = BlendshapeDeformer(asset.rig, mesh=asset.mesh, basis=basis,
                                     lip_tets=asset.lip_tets)
    bs = fit_geometry(target, bs_deformer, optimize_rigid=False)
    return {"target": target, "sim": sim, "bs": bs}


@pytest.fixture(scope="session")
def image_bundle(asset):
    """Lighting fit on the neutral splat plate plus the two-stage image fit."""
    truth = asset.truth
    lighting_fit = fit_lighting(asset.plates["neutral_splat"], asset.surface,
                                asset.surface.vertices, asset.camera)
    deformer = BlendshapeDeformer(asset.rig)
    lighting = SHLighting(truth.gamma, truth.albedo)
    fit = fit_image(asset.plates["posed_raster"], asset.roto, deformer,
                    asset.surface, lighting, asset.camera)
    collapse = fit_image(asset.plates["posed_raster"], asset.roto, deformer,
                         asset.surface, lighting, asset.camera,
                         prior_weight=1e12)
    return {"lighting_fit": lighting_fit, "fit": fit, "collapse": collapse,
            "deformer": deformer, "lighting": lighting}
