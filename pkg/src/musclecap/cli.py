"""Command-line pipeline driver.

Subcommands: gen-asset, precompute, simulate, fit-geometry, fit-lighting,
fit-image, gradcheck. Options resolve flag > config file > default, unknown
config keys are rejected, and every run writes a manifest with the resolved
options and the asset hash. Exit codes: 0 success, 1 solver failure, 2 bad
input.

Thread capping must precede the first numpy import, so this module defers all
numeric imports into the command bodies.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class _InputError(Exception):
    """Bad input: missing file, malformed config, invalid values. Exit 2."""


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        threads = os.environ.get("MUSCLECAP_THREADS")
    if threads is None:
        return
    if "numpy" in sys.modules:
        raise _InputError("thread cap requested after numpy was already loaded")
    for var in _THREAD_VARS:
        os.environ[var] = str(int(threads))


def _parse_vector(text: str, length: int, label: str):
    import numpy as np
    try:
        vec = np.array([float(p) for p in text.split(",")], dtype=np.float64)
    except ValueError as err:
        raise _InputError(f"{label} must be comma-separated numbers: {err}") from err
    if len(vec) != length:
        raise _InputError(f"{label} needs {length} entries, got {len(vec)}")
    return vec


def _load_config(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise _InputError(f"config file {p} not found")
    try:
        config = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise _InputError(f"config file {p} is not valid JSON: {err}") from err
    unknown = set(config) - allowed
    if unknown:
        raise _InputError(f"unknown config keys: {sorted(unknown)} "
                          f"(allowed: {sorted(allowed)})")
    return config


def _resolve(args, config: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _require_asset(path: str | None) -> Path:
    if path is None:
        raise _InputError("--asset is required")
    p = Path(path)
    if not (p / "mesh.json").exists():
        raise _InputError(f"{p} is not an asset directory; run gen-asset first")
    return p


def _require_basis(asset_dir: Path):
    from . import fileio
    basis_path = asset_dir / "basis.npz"
    if not basis_path.exists():
        raise _InputError(f"basis cache {basis_path} missing; run `precompute` "
                          f"on this asset first")
    return fileio.load_basis(basis_path)


def _build_system(asset, basis):
    from .quasistatic import FleshSystem
    return FleshSystem(mesh=asset.mesh, jaw=asset.rig.jaw, muscles=asset.muscles,
                       basis=basis, proxies=asset.proxies)


def _make_deformer(kind: str, asset, basis, cold_start: bool):
    from .capture import BlendshapeDeformer, SimulationDeformer
    if kind == "blendshape":
        return BlendshapeDeformer(asset.rig, mesh=asset.mesh, basis=basis,
                                  lip_tets=asset.lip_tets)
    if kind == "simulation":
        return SimulationDeformer(_build_system(asset, basis),
                                  cold_start=cold_start, lip_tets=asset.lip_tets)
    raise _InputError(f"unknown deformer {kind!r} (blendshape|simulation)")


def _write_manifest(out_dir: Path, command: str, options: dict,
                    asset_dir: Path | None) -> None:
    from . import __version__, fileio
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "options": options, "version": __version__}
    if asset_dir is not None:
        manifest["asset_hash"] = fileio.asset_hash(asset_dir)
    import numpy, scipy
    manifest["numpy"] = numpy.__version__
    manifest["scipy"] = scipy.__version__
    fileio.save_json(out_dir / "manifest.json", manifest)


def _cmd_gen_asset(args) -> int:
    config = _load_config(args.config, {"seed", "shapes", "muscles", "out"})
    seed = int(_resolve(args, config, "seed", 7))
    shapes = int(_resolve(args, config, "shapes", 6))
    muscles = int(_resolve(args, config, "muscles", 3))
    out = _resolve(args, config, "out", None)
    if out is None:
        raise _InputError("--out is required")
    from . import assets, fileio
    asset = assets.generate(assets.AssetSpec(seed=seed, num_shapes=shapes,
                                             num_muscles=muscles))
    out_dir = Path(out)
    fileio.save_asset(out_dir, asset)
    _write_manifest(out_dir, "gen-asset",
                    {"seed": seed, "shapes": shapes, "muscles": muscles}, out_dir)
    print(f"asset written to {out_dir}")
    return 0


def _cmd_precompute(args) -> int:
    config = _load_config(args.config, {"asset"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    from . import fileio
    from .anatomy import precompute_basis
    from .geometry import assemble_laplacian
    import numpy as np
    asset = fileio.load_asset(asset_dir)
    constrained = np.concatenate([asset.mesh.boundary_vertices,
                                  asset.mesh.inner_boundary])
    laplacian = assemble_laplacian(asset.mesh, constrained)
    basis = precompute_basis(asset.mesh, laplacian, asset.rig, asset.muscles)
    fileio.save_basis(asset_dir / "basis.npz", basis)
    print(f"basis cache written: {len(basis.shape_names)} displacement fields, "
          f"{len(basis.muscle_rest)} muscles")
    return 0


def _cmd_simulate(args) -> int:
    config = _load_config(args.config, {"asset", "out", "b", "j", "cold_start"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    out = Path(_resolve(args, config, "out", asset_dir / "run"))
    from . import fileio
    from .quasistatic import SolveError, solve_equilibrium
    asset = fileio.load_asset(asset_dir)
    basis = _require_basis(asset_dir)
    k = len(basis.shape_names)
    b = _parse_vector(_resolve(args, config, "b", ",".join(["0"] * k)), k, "--b")
    j = _parse_vector(_resolve(args, config, "j", "0,0,0,0,0,0"), 6, "--j")
    system = _build_system(asset, basis)
    state = solve_equilibrium(system, b, j)
    out.mkdir(parents=True, exist_ok=True)
    surface_pos = state.positions[asset.mesh.boundary_vertices]
    fileio.write_obj(out / "surface.obj", surface_pos, asset.surface.triangles)
    fileio.save_json(out / "state.json", {
        "b": b.tolist(), "j": j.tolist(),
        "iterations": state.iterations,
        "residual_norm": state.residual_norm,
        "tolerance": state.tolerance,
        "activations": state.activations.tolist(),
        "total_volume": asset.mesh.total_volume(state.positions),
        "rest_volume": asset.mesh.total_volume()})
    _write_manifest(out, "simulate", {"b": b.tolist(), "j": j.tolist()}, asset_dir)
    print(f"equilibrium in {state.iterations} Newton iterations, "
          f"residual {state.residual_norm:.3e}")
    return 0


def _cmd_fit_geometry(args) -> int:
    config = _load_config(args.config, {"asset", "out", "target", "deformer",
                                        "lambda_geometry", "cold_start"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    out = Path(_resolve(args, config, "out", asset_dir / "fit_geometry"))
    deformer_kind = _resolve(args, config, "deformer", "simulation")
    lam = float(_resolve(args, config, "lambda_geometry", 1e-6))
    cold = bool(_resolve(args, config, "cold_start", False))
    from . import fileio
    from .capture import fit_geometry
    from .rig import evaluate_surface
    asset = fileio.load_asset(asset_dir)
    basis = _require_basis(asset_dir)
    target_path = _resolve(args, config, "target", None)
    if target_path is None:
        # No target supplied: fit the truth pose's blendshape surface.
        target = evaluate_surface(asset.rig, asset.truth.w_geometry)
    else:
        target = fileio.read_obj(target_path)[0]
    deformer = _make_deformer(deformer_kind, asset, basis, cold)
    fit = fit_geometry(target, deformer, regularization=lam)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_json(out / "fit.json", fileio.fit_result_payload(fit))
    points, _ = deformer.evaluate(fit.w)
    fileio.write_obj(out / "fitted_surface.obj", points, asset.surface.triangles)
    if fit.activations is not None:
        fileio.write_obj(out / "activation_colors.obj", points,
                         asset.surface.triangles,
                         colors=_surface_activation_colors(asset, fit.activations))
    _write_manifest(out, "fit-geometry",
                    {"deformer": deformer_kind, "lambda_geometry": lam}, asset_dir)
    print(f"geometry fit RMSE {fit.rmse:.3e} in {fit.report.iterations} iterations")
    return 0


def _surface_activation_colors(asset, activations):
    """Per-surface-vertex coloring from per-muscle activations.

    Each surface vertex takes the strongest activation among muscles whose
    track set contains a flesh vertex directly below it; red = slack,
    white = activated half way or more.
    """
    import numpy as np
    from .capture import activation_colors
    per_vertex = np.zeros(asset.surface.num_vertices)
    for m, act in zip(asset.muscles, activations):
        on_surface = np.isin(asset.mesh.boundary_vertices, m.vertices)
        per_vertex[on_surface] = np.maximum(per_vertex[on_surface], act)
    return activation_colors(per_vertex)


def _cmd_fit_lighting(args) -> int:
    config = _load_config(args.config, {"asset", "out", "plate", "lambda_smooth"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    out = Path(_resolve(args, config, "out", asset_dir / "fit_lighting"))
    lam = float(_resolve(args, config, "lambda_smooth", 2500.0))
    plate_path = _resolve(args, config, "plate",
                          asset_dir / "plates" / "neutral_splat.png")
    if not Path(plate_path).exists():
        raise _InputError(f"plate {plate_path} not found")
    from . import fileio
    from .capture import fit_lighting
    asset = fileio.load_asset(asset_dir)
    plate = fileio.load_image(plate_path)
    fit = fit_lighting(plate, asset.surface, asset.surface.vertices,
                       asset.camera, smoothness=lam)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_json(out / "fit.json", fileio.fit_result_payload(fit))
    _write_manifest(out, "fit-lighting", {"lambda_smooth": lam,
                                          "plate": str(plate_path)}, asset_dir)
    print(f"lighting fit RMS {fit.rms:.3e} in {fit.report.iterations} iterations")
    return 0


def _cmd_fit_image(args) -> int:
    config = _load_config(args.config, {
        "asset", "out", "plate", "deformer", "lighting", "cold_start",
        "lambda_roto", "lambda_refine_roto", "lambda_prior", "free_rigid"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    out = Path(_resolve(args, config, "out", asset_dir / "fit_image"))
    deformer_kind = _resolve(args, config, "deformer", "blendshape")
    cold = bool(_resolve(args, config, "cold_start", False))
    lam_roto = float(_resolve(args, config, "lambda_roto", 3600.0))
    lam_refine = float(_resolve(args, config, "lambda_refine_roto", 1e-4))
    lam_prior = float(_resolve(args, config, "lambda_prior", 1.0))
    free_rigid = bool(_resolve(args, config, "free_rigid", False))
    plate_path = _resolve(args, config, "plate",
                          asset_dir / "plates" / "posed_raster.png")
    if not Path(plate_path).exists():
        raise _InputError(f"plate {plate_path} not found")
    from . import fileio
    from .capture import fit_image
    from .imaging import SHLighting
    import numpy as np
    asset = fileio.load_asset(asset_dir)
    basis = _require_basis(asset_dir)
    lighting_path = _resolve(args, config, "lighting", None)
    if lighting_path is None:
        lighting = SHLighting(asset.truth.gamma, asset.truth.albedo)
    else:
        d = fileio.load_json(lighting_path)
        lighting = SHLighting(np.asarray(d["gamma"]), np.asarray(d["albedo"]))
    deformer = _make_deformer(deformer_kind, asset, basis, cold)
    plate = fileio.load_image(plate_path)
    fit = fit_image(plate, asset.roto, deformer, asset.surface, lighting,
                    asset.camera, optimize_rigid=free_rigid,
                    roto_regularization=lam_roto,
                    refine_roto_weight=lam_refine, prior_weight=lam_prior)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_json(out / "fit.json", fileio.fit_result_payload(fit))
    points, _ = deformer.evaluate(fit.w)
    fileio.write_obj(out / "fitted_surface.obj", points, asset.surface.triangles)
    _write_manifest(out, "fit-image",
                    {"deformer": deformer_kind, "lambda_roto": lam_roto,
                     "lambda_refine_roto": lam_refine, "lambda_prior": lam_prior,
                     "free_rigid": free_rigid, "plate": str(plate_path)}, asset_dir)
    stage2 = fit.stage_reports[1]
    print(f"image fit done: stage-2 cost {stage2.final_cost:.6e} "
          f"after {stage2.iterations} iterations")
    return 0


def _cmd_gradcheck(args) -> int:
    config = _load_config(args.config, {"asset", "step", "tolerance"})
    asset_dir = _require_asset(_resolve(args, config, "asset", None))
    step = float(_resolve(args, config, "step", 1e-6))
    tolerance = float(_resolve(args, config, "tolerance", 1e-3))
    from . import fileio
    import numpy as np
    from .quasistatic import SolveSettings, solve_equilibrium
    from .sensitivity import full_position_jacobian, solve_sensitivities
    asset = fileio.load_asset(asset_dir)
    basis = _require_basis(asset_dir)
    system = _build_system(asset, basis)
    k = len(basis.shape_names)
    w = asset.truth.w_geometry.copy()
    b, j = w[:k], w[k:]

    # The differences below sit near the solver's position accuracy, so the
    # finite-difference states are solved well past the default tolerance.
    tight = SolveSettings(tolerance_scale=1e-10, max_iterations=80)
    state = solve_equilibrium(system, b, j, settings=tight)
    block = solve_sensitivities(system, state)
    analytic = full_position_jacobian(system, block)[asset.mesh.boundary_vertices]
    sidx = asset.mesh.boundary_vertices

    names = [f"b:{n}" for n in basis.shape_names] + \
        ["j:rx", "j:ry", "j:rz", "j:tx", "j:ty", "j:tz"]
    print(f"{'parameter':<14} {'analytic':>12} {'fd':>12} {'rel err':>10}")
    worst = 0.0
    for p, name in enumerate(names):
        wp, wm = w.copy(), w.copy()
        wp[p] += step
        wm[p] -= step
        plus = solve_equilibrium(system, wp[:k], wp[k:], settings=tight,
                                 warm_start=state)
        minus = solve_equilibrium(system, wm[:k], wm[k:], settings=tight,
                                  warm_start=state)
        fd = (plus.positions[sidx] - minus.positions[sidx]) / (2.0 * step)
        col = analytic[:, :, p]
        denom = max(np.linalg.norm(fd), 1e-12)
        rel = float(np.linalg.norm(col - fd) / denom)
        worst = max(worst, rel)
        print(f"{name:<14} {np.linalg.norm(col):12.4e} {np.linalg.norm(fd):12.4e} "
              f"{rel:10.2e}")
    print(f"worst relative error {worst:.2e} (tolerance {tolerance:.1e})")
    return 0 if worst < tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="musclecap",
        description="Anatomical face capture pipeline on a synthetic slab asset")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config; flags override its keys")
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-asset", help="generate the synthetic slab asset")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--shapes", type=int)
    p.add_argument("--muscles", type=int)
    p.set_defaults(func=_cmd_gen_asset)

    p = sub.add_parser("precompute", help="build the muscle morph basis cache")
    common(p, out=False)
    p.add_argument("--asset")
    p.set_defaults(func=_cmd_precompute)

    p = sub.add_parser("simulate", help="solve one equilibrium at (b, j)")
    common(p)
    p.add_argument("--asset")
    p.add_argument("--b", help="comma-separated blendshape weights")
    p.add_argument("--j", help="comma-separated jaw parameters (rx,ry,rz,tx,ty,tz)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit-geometry", help="fit controls to a 3D target surface")
    common(p)
    p.add_argument("--asset")
    p.add_argument("--target", help="target OBJ (defaults to the truth pose)")
    p.add_argument("--deformer", choices=["blendshape", "simulation"])
    p.add_argument("--lambda-geometry", dest="lambda_geometry", type=float)
    p.add_argument("--cold-start", dest="cold_start", action="store_const", const=True)
    p.set_defaults(func=_cmd_fit_geometry)

    p = sub.add_parser("fit-lighting", help="fit SH lighting and albedo to a plate")
    common(p)
    p.add_argument("--asset")
    p.add_argument("--plate", help="plate PNG (defaults to the neutral plate)")
    p.add_argument("--lambda-smooth", dest="lambda_smooth", type=float)
    p.set_defaults(func=_cmd_fit_lighting)

    p = sub.add_parser("fit-image", help="two-stage roto + shading fit")
    common(p)
    p.add_argument("--asset")
    p.add_argument("--plate", help="plate PNG (defaults to the posed plate)")
    p.add_argument("--deformer", choices=["blendshape", "simulation"])
    p.add_argument("--lighting", help="fit-lighting result JSON (defaults to truth)")
    p.add_argument("--lambda-roto", dest="lambda_roto", type=float)
    p.add_argument("--lambda-refine-roto", dest="lambda_refine_roto", type=float)
    p.add_argument("--lambda-prior", dest="lambda_prior", type=float)
    p.add_argument("--free-rigid", dest="free_rigid", action="store_const", const=True)
    p.add_argument("--cold-start", dest="cold_start", action="store_const", const=True)
    p.set_defaults(func=_cmd_fit_image)

    p = sub.add_parser("gradcheck", help="finite-difference check of sensitivities")
    common(p, out=False)
    p.add_argument("--asset")
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except _InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        from .quasistatic import SolveError
        from .capture import CaptureError
        if isinstance(err, (SolveError, CaptureError)):
            print(f"solver failure: {err}", file=sys.stderr)
            return 1
        from .geometry import MeshError
        from .fileio import FileFormatError
        if isinstance(err, (MeshError, FileFormatError, ValueError, KeyError)):
            print(f"error: {err}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
