"""Nonlinear least-squares capture fits over animator controls.

A trust-region dogleg minimizer drives stacked residual blocks: 3D geometry
targets, rotoscoped 2D correspondences, vertex-sampled shading against a
plate pyramid, Tikhonov regularizers, and albedo smoothness. Two deformers
supply the surface and its parameter Jacobian: a pure blendshape rig evaluation
and the quasistatic muscle simulation with its sensitivity chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rig as rig_mod
from .anatomy import PrecomputedMuscleBasis
from .geometry import SurfaceMesh, TetMesh, surface_edges, vertex_normals
from .imaging import (Camera, ImagePyramid, RotoConstraint, SHLighting,
                      DEFAULT_LEVEL_WEIGHTS, build_pyramid,
                      roto_position_jacobian, roto_residual, sample_bilinear,
                      shading_system, vertex_visibility, project)
from .quasistatic import FleshSystem, SolveError, SolveSettings, solve_equilibrium
from .rig import Rig, euler_xyz
from .sensitivity import chain_to_observables, full_position_jacobian, \
    solve_sensitivities


class CaptureError(RuntimeError):
    """Raised when a fit cannot be evaluated or set up."""


@dataclass
class DoglegSettings:
    """Trust-region dogleg controls."""

    initial_radius: float = 1.0
    min_radius: float = 1e-12
    gradient_tolerance: float = 1e-8
    max_iterations: int = 200
    low_gain: float = 0.25
    high_gain: float = 0.75
    shrink: float = 0.25
    grow: float = 2.0
    damping: float = 1e-10
    cost_tolerance: float = 1e-14

    def __post_init__(self):
        if not 0.0 < self.min_radius < self.initial_radius:
            raise CaptureError("need 0 < min radius < initial radius")


@dataclass
class ConvergenceReport:
    converged: bool
    status: str
    iterations: int
    initial_cost: float
    final_cost: float
    gradient_norm: float
    # Objective after each accepted step, starting value first. Non-increasing.
    costs: list[float] = field(default_factory=list)
    gauss_newton_failures: int = 0


def dogleg_minimize(problem, x0: np.ndarray, settings: DoglegSettings | None = None,
                    project_params=None) -> tuple[np.ndarray, ConvergenceReport]:
    """Minimize 0.5 ||r(x)||^2 by the classic trust-region dogleg.

    `problem` is either a callable x -> (residual, jacobian) or a
    CaptureProblem. The step blends the damped Gauss-Newton solution with the
    Cauchy point; steps with positive gain ratio are accepted and the radius
    scales by 0.25x / 2x at gain 0.25 / 0.75. `project_params` (optional) maps
    a trial point onto the feasible set before evaluation, so accepted
    iterates always satisfy the constraint.
    """
    if settings is None:
        settings = DoglegSettings()
    if callable(problem):
        fun = problem
    else:
        fun = lambda p: residual_and_jacobian(problem, p)

    x = np.asarray(x0, dtype=np.float64).copy()
    if project_params is not None:
        x = project_params(x)
    r, jac = fun(x)
    cost = 0.5 * float(r @ r)
    grad = jac.T @ r
    radius = settings.initial_radius
    costs = [cost]
    gn_failures = 0
    status = "max iterations"
    converged = False

    iteration = 0
    while iteration < settings.max_iterations:
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= settings.gradient_tolerance:
            status = "gradient tolerance"
            converged = True
            break
        if radius < settings.min_radius:
            status = "trust radius collapsed"
            break
        iteration += 1

        h_gn = None
        jtj = jac.T @ jac
        try:
            h_gn = np.linalg.solve(jtj + settings.damping * np.eye(len(x)), -grad)
            if not np.all(np.isfinite(h_gn)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            gn_failures += 1

        jg = jac @ grad
        denom = float(jg @ jg)
        alpha = float(grad @ grad) / denom if denom > 0 else 0.0
        h_sd = -alpha * grad

        if h_gn is not None and np.linalg.norm(h_gn) <= radius:
            step = h_gn
        elif np.linalg.norm(h_sd) >= radius:
            step = -(radius / np.linalg.norm(grad)) * grad
        elif h_gn is None:
            step = h_sd
        else:
            # Walk from the Cauchy point toward Gauss-Newton to the boundary.
            d = h_gn - h_sd
            a = float(d @ d)
            b = 2.0 * float(h_sd @ d)
            c = float(h_sd @ h_sd) - radius**2
            beta = (-b + np.sqrt(max(b**2 - 4 * a * c, 0.0))) / (2 * a)
            step = h_sd + beta * d

        predicted = -float(grad @ step) - 0.5 * float(np.linalg.norm(jac @ step)**2)
        if predicted <= settings.cost_tolerance * max(cost, settings.cost_tolerance):
            # The model has nothing left to offer at this scale: stop rather
            # than grinding the radius down on rounding noise.
            status = "cost stagnation"
            converged = True
            break
        trial = x + step
        if project_params is not None:
            trial = project_params(trial)
        try:
            r_t, jac_t = fun(trial)
        except (CaptureError, SolveError):
            radius *= settings.shrink
            continue
        trial_cost = 0.5 * float(r_t @ r_t)
        rho = (cost - trial_cost) / predicted if predicted > 0 else -1.0

        if rho > 0:
            x, r, jac, cost = trial, r_t, jac_t, trial_cost
            grad = jac.T @ r
            costs.append(cost)
        if rho < settings.low_gain:
            radius *= settings.shrink
        elif rho > settings.high_gain:
            radius *= settings.grow

    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    if not converged and gnorm <= settings.gradient_tolerance:
        status = "gradient tolerance"
        converged = True
    report = ConvergenceReport(converged=converged, status=status,
                               iterations=iteration, initial_cost=costs[0],
                               final_cost=cost, gradient_norm=gnorm, costs=costs,
                               gauss_newton_failures=gn_failures)
    return x, report


@dataclass
class ParameterLayout:
    """Named contiguous blocks of the flat parameter vector."""

    blocks: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(size for _, size in self.blocks)

    def slice_of(self, name: str) -> slice:
        start = 0
        for block, size in self.blocks:
            if block == name:
                return slice(start, start + size)
            start += size
        raise KeyError(name)

    def split(self, p: np.ndarray) -> dict[str, np.ndarray]:
        return {name: p[self.slice_of(name)] for name, _ in self.blocks}

    def __contains__(self, name: str) -> bool:
        return any(block == name for block, _ in self.blocks)


@dataclass
class PoseEval:
    """One deformer evaluation with rigid alignment applied."""

    points: np.ndarray       # model-space surface (S, 3)
    world: np.ndarray        # R(theta) points + t
    observables: np.ndarray  # d(world)/d(w, theta, t), shape (3S, W + 6)
    width: int               # number of deformer parameters W

    def chain(self, d_world: np.ndarray, layout: ParameterLayout) -> dict[str, np.ndarray]:
        """Map rows differentiated w.r.t. world positions onto parameter blocks."""
        rows = d_world.reshape(len(d_world), -1) @ self.observables
        out = {"w": rows[:, :self.width]}
        if "theta" in layout:
            out["theta"] = rows[:, self.width:self.width + 3]
        if "t" in layout:
            out["t"] = rows[:, self.width + 3:self.width + 6]
        return out


class BlendshapeDeformer:
    """Direct rig evaluation: surface and Jacobian from the blendshape basis.

    The optional tet mesh and muscle basis extend posed surfaces into the
    volume (harmonic morph fields plus jaw skinning) for volume reporting.
    """

    def __init__(self, rig: Rig, mesh: TetMesh | None = None,
                 basis: PrecomputedMuscleBasis | None = None,
                 lip_tets: np.ndarray | None = None):
        self.rig = rig
        self.mesh = mesh
        self.basis = basis
        self.lip_tets = None if lip_tets is None else np.asarray(lip_tets, dtype=np.int64)

    @property
    def num_parameters(self) -> int:
        return self.rig.controls.num_controls

    def evaluate(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b, j = self.rig.controls.split(w)
        points = rig_mod.evaluate_surface(self.rig, w)
        pj = rig_mod.point_param_jacobian(
            self.rig.jaw, self.rig.skin_weights, self.rig.blendshapes.neutral,
            self.rig.blendshapes.deltas, b, j)
        cj = self.rig.controls.jacobian(w)
        jac = (pj.reshape(-1, pj.shape[2]) @ cj).reshape(len(points), 3, -1)
        return points, jac

    def volume_positions(self, w: np.ndarray) -> np.ndarray:
        if self.mesh is None or self.basis is None:
            raise CaptureError("volume extension needs a tet mesh and muscle basis")
        b, j = self.rig.controls.split(w)
        pre = self.mesh.vertices + np.einsum("k,kvi->vi", b, self.basis.fields)
        return rig_mod.skin_transform(self.rig.jaw, self.basis.vertex_weights, pre, j)

    def volume_report(self, w: np.ndarray) -> "VolumeReport | None":
        if self.mesh is None or self.basis is None:
            return None
        return _volume_report(self.mesh, self.volume_positions(w), self.lip_tets)


class SimulationDeformer:
    """Quasistatic equilibrium surface with sensitivity-based Jacobians.

    Each evaluation solves for equilibrium (warm-started from the previous
    accepted solve unless cold_start) and differentiates the unconstrained
    positions through the equilibrium conditions.
    """

    def __init__(self, system: FleshSystem, solve_settings: SolveSettings | None = None,
                 cold_start: bool = False, lip_tets: np.ndarray | None = None):
        self.system = system
        self.solve_settings = solve_settings or SolveSettings()
        self.cold_start = cold_start
        self.lip_tets = None if lip_tets is None else np.asarray(lip_tets, dtype=np.int64)
        self.last_state = None

    @property
    def num_parameters(self) -> int:
        return len(self.system.basis.shape_names) + 6

    def evaluate(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = len(self.system.basis.shape_names)
        w = np.asarray(w, dtype=np.float64)
        warm = None if self.cold_start else self.last_state
        try:
            state = solve_equilibrium(self.system, w[:k], w[k:],
                                      self.solve_settings, warm_start=warm)
        except SolveError as err:
            raise CaptureError(
                f"equilibrium failed at parameters {np.array2string(w, precision=4)}: {err}"
            ) from err
        self.last_state = state
        block = solve_sensitivities(self.system, state)
        full = full_position_jacobian(self.system, block)
        sidx = self.system.mesh.boundary_vertices
        return state.positions[sidx].copy(), full[sidx]

    def volume_report(self, w: np.ndarray) -> "VolumeReport | None":
        if self.last_state is None:
            return None
        return _volume_report(self.system.mesh, self.last_state.positions, self.lip_tets)


@dataclass
class VolumeReport:
    """Total and lip-region tet volumes at rest and in the posed state."""

    rest_total: float
    posed_total: float
    rest_lip: float | None = None
    posed_lip: float | None = None

    @property
    def total_change(self) -> float:
        return self.posed_total / self.rest_total - 1.0

    @property
    def lip_change(self) -> float | None:
        if self.rest_lip is None or self.rest_lip == 0.0:
            return None
        return self.posed_lip / self.rest_lip - 1.0


def _tet_volumes(mesh: TetMesh, positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    corners = positions[mesh.tets[tets]]
    edges = corners[:, 1:] - corners[:, :1]
    return np.linalg.det(edges.transpose(0, 2, 1)) / 6.0


def _volume_report(mesh: TetMesh, positions: np.ndarray,
                   lip_tets: np.ndarray | None) -> VolumeReport:
    all_tets = np.arange(len(mesh.tets))
    rep = VolumeReport(rest_total=float(mesh.rest_volumes.sum()),
                       posed_total=float(_tet_volumes(mesh, positions, all_tets).sum()))
    if lip_tets is not None and len(lip_tets):
        rep.rest_lip = float(mesh.rest_volumes[lip_tets].sum())
        rep.posed_lip = float(_tet_volumes(mesh, positions, lip_tets).sum())
    return rep


@dataclass
class GeometryTerm:
    """3D point targets: rows are target - world position per coordinate."""

    name: str
    target: np.ndarray
    weight: float = 1.0

    def rows(self, values, pose: PoseEval, layout: ParameterLayout):
        res = self.weight * (self.target - pose.world).reshape(-1)
        eye = -self.weight * np.eye(res.size)
        jacs = pose.chain(eye.reshape(res.size, -1, 3), layout)
        return res, jacs


@dataclass
class RotoTerm:
    """Projected roto correspondences against their tracked pixel targets."""

    name: str
    roto: RotoConstraint
    triangles: np.ndarray
    cam: Camera
    weight: float = 1.0

    def rows(self, values, pose: PoseEval, layout: ParameterLayout):
        res = self.weight * roto_residual(self.roto, self.triangles, pose.world, self.cam)
        d_world = self.weight * roto_position_jacobian(
            self.roto, self.triangles, pose.world, self.cam)
        return res, pose.chain(d_world, layout)


@dataclass
class ShadingTerm:
    """Vertex-sampled plate residual; differentiates pose and/or lighting.

    With a pose (deformer-driven fits) the lighting is fixed and rows chain
    through world positions, including recomputed normals. Without a pose the
    positions are fixed and the gamma/albedo blocks carry the Jacobian;
    visibility is then frozen at construction for determinism.
    """

    name: str
    surface: SurfaceMesh
    cam: Camera
    pyramid: ImagePyramid
    level_weights: tuple = DEFAULT_LEVEL_WEIGHTS
    weight: float = 1.0
    lighting: SHLighting | None = None
    fixed_positions: np.ndarray | None = None
    fixed_normals: np.ndarray | None = None
    fixed_visibility: np.ndarray | None = None

    def rows(self, values, pose: PoseEval | None, layout: ParameterLayout):
        if "gamma" in layout:
            lighting = SHLighting(values["gamma"], values["albedo"].reshape(-1, 3))
        else:
            lighting = self.lighting
        if pose is not None:
            sys = shading_system(self.surface, pose.world, None, lighting,
                                 self.cam, self.pyramid, self.level_weights)
        else:
            sys = shading_system(None, self.fixed_positions, self.fixed_normals,
                                 lighting, self.cam, self.pyramid,
                                 self.level_weights, visibility=self.fixed_visibility)
        res = self.weight * sys.residual
        jacs = {}
        if pose is not None:
            jacs.update(pose.chain(self.weight * sys.d_positions, layout))
        if "gamma" in layout:
            jacs["gamma"] = self.weight * sys.d_gamma
            jacs["albedo"] = self.weight * sys.d_albedo.reshape(res.size, -1)
        return res, jacs


@dataclass
class TikhonovTerm:
    """Rows weight * (block - anchor); the plain L2 pull on one block."""

    name: str
    block: str
    weight: float
    anchor: np.ndarray | None = None

    def rows(self, values, pose, layout: ParameterLayout):
        vec = values[self.block]
        anchor = 0.0 if self.anchor is None else self.anchor
        res = self.weight * (vec - anchor)
        return res, {self.block: self.weight * np.eye(len(vec))}


@dataclass
class AlbedoSmoothnessTerm:
    """Per-edge albedo differences over the surface graph, one row per channel."""

    name: str
    edges: np.ndarray
    num_vertices: int
    weight: float

    def rows(self, values, pose, layout: ParameterLayout):
        c = values["albedo"].reshape(self.num_vertices, 3)
        diff = c[self.edges[:, 0]] - c[self.edges[:, 1]]
        res = self.weight * diff.reshape(-1)
        jac = np.zeros((res.size, 3 * self.num_vertices))
        rows = np.arange(res.size)
        cols_i = (3 * self.edges[:, 0, None] + np.arange(3)).reshape(-1)
        cols_j = (3 * self.edges[:, 1, None] + np.arange(3)).reshape(-1)
        jac[rows, cols_i] = self.weight
        jac[rows, cols_j] = -self.weight
        return res, {"albedo": jac}


@dataclass
class CaptureProblem:
    """Stacked least-squares problem over named parameter blocks.

    The deformer (when present) is evaluated once per parameter vector and
    shared by every data term; rigid alignment comes from the theta/t blocks
    when they are optimized, else from fixed_rigid.
    """

    layout: ParameterLayout
    terms: list
    deformer: BlendshapeDeformer | SimulationDeformer | None = None
    fixed_rigid: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not self.terms:
            raise CaptureError("a capture problem needs at least one term")

    def evaluate_pose(self, values: dict[str, np.ndarray]) -> PoseEval | None:
        if self.deformer is None:
            return None
        points, jac = self.deformer.evaluate(values["w"])
        if "theta" in self.layout:
            theta, t = values["theta"], values["t"]
        elif self.fixed_rigid is not None:
            theta, t = self.fixed_rigid
        else:
            theta, t = np.zeros(3), np.zeros(3)
        obs = chain_to_observables(points, jac, theta, t)
        world = points @ euler_xyz(theta).T + t
        return PoseEval(points=points, world=world, observables=obs,
                        width=jac.shape[2])


def residual_and_jacobian(problem: CaptureProblem,
                          parameters: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack every term's weighted rows into one residual and dense Jacobian."""
    p = np.asarray(parameters, dtype=np.float64)
    if len(p) != problem.layout.total:
        raise CaptureError(f"expected {problem.layout.total} parameters, got {len(p)}")
    values = problem.layout.split(p)
    pose = problem.evaluate_pose(values)
    res_parts, jac_parts = [], []
    for term in problem.terms:
        res, jacs = term.rows(values, pose, problem.layout)
        jac = np.zeros((res.size, problem.layout.total))
        for block, rows in jacs.items():
            if block in problem.layout:
                jac[:, problem.layout.slice_of(block)] = rows
        res_parts.append(res)
        jac_parts.append(jac)
    return np.concatenate(res_parts), np.vstack(jac_parts)


def term_norms(problem: CaptureProblem, parameters: np.ndarray) -> dict[str, float]:
    """Euclidean norm of each term's weighted residual block."""
    values = problem.layout.split(np.asarray(parameters, dtype=np.float64))
    pose = problem.evaluate_pose(values)
    return {term.name: float(np.linalg.norm(term.rows(values, pose, problem.layout)[0]))
            for term in problem.terms}


def _fit_extras(deformer, w):
    activations = None
    if isinstance(deformer, SimulationDeformer) and deformer.last_state is not None:
        activations = deformer.last_state.activations.copy()
    return activations, deformer.volume_report(w)


@dataclass
class GeometryFit:
    w: np.ndarray
    theta: np.ndarray
    t: np.ndarray
    rmse: float
    report: ConvergenceReport
    term_norms: dict[str, float]
    activations: np.ndarray | None = None
    volume: VolumeReport | None = None


def fit_geometry(target: np.ndarray, deformer, regularization: float = 1e-6,
                 settings: DoglegSettings | None = None,
                 optimize_rigid: bool = True) -> GeometryFit:
    """Fit controls plus rigid alignment to per-vertex 3D surface targets.

    Minimizes the squared point distance plus `regularization` times ||w||^2,
    starting from zeros.
    """
    target = np.asarray(target, dtype=np.float64)
    width = deformer.num_parameters
    blocks = [("w", width)] + ([("theta", 3), ("t", 3)] if optimize_rigid else [])
    layout = ParameterLayout(blocks)
    problem = CaptureProblem(
        layout=layout,
        terms=[GeometryTerm("geometry", target),
               TikhonovTerm("w_regularizer", "w", np.sqrt(regularization))],
        deformer=deformer)
    params, report = dogleg_minimize(problem, np.zeros(layout.total), settings)
    values = layout.split(params)
    pose = problem.evaluate_pose(values)
    rmse = float(np.sqrt(np.mean(np.sum((pose.world - target)**2, axis=1))))
    theta = values.get("theta", np.zeros(3))
    t = values.get("t", np.zeros(3))
    activations, volume = _fit_extras(deformer, values["w"])
    return GeometryFit(w=values["w"], theta=theta, t=t, rmse=rmse, report=report,
                       term_norms=term_norms(problem, params),
                       activations=activations, volume=volume)


@dataclass
class LightingFit:
    gamma: np.ndarray
    albedo: np.ndarray
    rms: float
    report: ConvergenceReport
    term_norms: dict[str, float]


def fit_lighting(plate: np.ndarray, surface: SurfaceMesh, positions: np.ndarray,
                 cam: Camera, smoothness: float = 2500.0,
                 settings: DoglegSettings | None = None) -> LightingFit:
    """Recover SH irradiance coefficients and per-vertex albedo from one plate.

    The pose is fixed, so normals and visibility are frozen up front. Albedo
    differences across surface edges are penalized by `smoothness`, and the
    albedo is projected nonnegative after every accepted step. Gamma and
    albedo are identifiable only up to a mutual scale; their product is the
    fitted quantity.
    """
    plate = np.asarray(plate, dtype=np.float64)
    if plate.max() <= 1e-9:
        raise CaptureError("plate is black; lighting is unconstrained")
    positions = np.asarray(positions, dtype=np.float64)
    normals = vertex_normals(surface, positions)
    pyramid = ImagePyramid(levels=[plate])
    visibility = vertex_visibility(cam, positions, normals, num_levels=1)
    nv = len(positions)

    layout = ParameterLayout([("gamma", 9), ("albedo", 3 * nv)])
    edges = surface_edges(surface)
    problem = CaptureProblem(
        layout=layout,
        terms=[ShadingTerm("shading", surface, cam, pyramid, (1.0,),
                           fixed_positions=positions, fixed_normals=normals,
                           fixed_visibility=visibility),
               AlbedoSmoothnessTerm("albedo_smoothness", edges, nv,
                                    np.sqrt(smoothness))])

    # Start at unit irradiance with the plate's visible mean as albedo, a
    # basin where both gradient blocks are nonzero.
    x0 = np.zeros(layout.total)
    x0[0] = 1.0 / 0.282095
    uv, _ = project(cam, positions[visibility])
    seen = sample_bilinear(plate, uv)[0]
    x0[9:] = np.full((nv, 3), max(float(seen.mean()), 0.05)).reshape(-1)

    def clamp_albedo(p):
        out = p.copy()
        out[9:] = np.maximum(out[9:], 0.0)
        return out

    params, report = dogleg_minimize(problem, x0, settings, project_params=clamp_albedo)
    values = layout.split(params)
    norms = term_norms(problem, params)
    rows = 3 * int(visibility.sum())
    rms = norms["shading"] / np.sqrt(rows)
    return LightingFit(gamma=values["gamma"], albedo=values["albedo"].reshape(nv, 3),
                       rms=rms, report=report, term_norms=norms)


@dataclass
class ImageFit:
    w: np.ndarray
    w_initial: np.ndarray
    theta: np.ndarray
    t: np.ndarray
    stage_reports: list[ConvergenceReport]
    term_norms: dict[str, float]
    activations: np.ndarray | None = None
    volume: VolumeReport | None = None


def fit_image(plate: np.ndarray, roto: RotoConstraint, deformer,
              surface: SurfaceMesh, lighting: SHLighting, cam: Camera,
              theta: np.ndarray | None = None, t: np.ndarray | None = None,
              optimize_rigid: bool = False,
              roto_regularization: float = 3600.0,
              refine_roto_weight: float = 1e-4, prior_weight: float = 1.0,
              settings: DoglegSettings | None = None) -> ImageFit:
    """Two-stage image fit: roto-only initialization, then shading refinement.

    Stage 1 minimizes the roto reprojection with `roto_regularization` times
    ||w||^2 and yields the anchor w_hat. Stage 2 minimizes the pyramid shading
    residual plus `refine_roto_weight` times the roto term and `prior_weight`
    times ||w - w_hat||^2. Rigid alignment stays fixed unless optimize_rigid.
    """
    theta = np.zeros(3) if theta is None else np.asarray(theta, dtype=np.float64)
    t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
    width = deformer.num_parameters
    blocks = [("w", width)] + ([("theta", 3), ("t", 3)] if optimize_rigid else [])
    layout = ParameterLayout(blocks)
    rigid = (theta, t)

    stage1 = CaptureProblem(
        layout=layout,
        terms=[RotoTerm("roto", roto, surface.triangles, cam),
               TikhonovTerm("w_regularizer", "w", np.sqrt(roto_regularization))],
        deformer=deformer, fixed_rigid=rigid)
    x0 = np.zeros(layout.total)
    if optimize_rigid:
        x0[layout.slice_of("theta")] = theta
        x0[layout.slice_of("t")] = t
    p1, report1 = dogleg_minimize(stage1, x0, settings)
    w_hat = layout.split(p1)["w"].copy()

    pyramid = build_pyramid(np.asarray(plate, dtype=np.float64), num_levels=3)
    stage2 = CaptureProblem(
        layout=layout,
        terms=[ShadingTerm("shading", surface, cam, pyramid, lighting=lighting),
               RotoTerm("roto", roto, surface.triangles, cam,
                        weight=np.sqrt(refine_roto_weight)),
               TikhonovTerm("prior", "w", np.sqrt(prior_weight), anchor=w_hat)],
        deformer=deformer, fixed_rigid=rigid)
    p2, report2 = dogleg_minimize(stage2, p1, settings)
    values = layout.split(p2)
    activations, volume = _fit_extras(deformer, values["w"])
    return ImageFit(w=values["w"], w_initial=w_hat,
                    theta=values.get("theta", theta), t=values.get("t", t),
                    stage_reports=[report1, report2],
                    term_norms=term_norms(stage2, p2),
                    activations=activations, volume=volume)


def activation_colors(activations: np.ndarray) -> np.ndarray:
    """Diagnostic vertex colors: red at zero activation, white from 0.5 up."""
    a = np.clip(np.asarray(activations, dtype=np.float64) / 0.5, 0.0, 1.0)
    return np.stack([np.ones_like(a), a, a], axis=1)
