"""File formats: asset directories, basis caches, OBJ, PNG, fit results.

JSON carries every numeric payload with full float precision (Python's
shortest round-trip repr), so identical data produces identical bytes. Plates
go through 8-bit PNG, the one deliberately lossy format in the pipeline.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .anatomy import Muscle, PrecomputedMuscleBasis
from .assets import Asset, AssetSpec, GroundTruth
from .capture import ConvergenceReport, VolumeReport
from .geometry import Embedding, HalfSpaceProxy, SphereProxy, SurfaceMesh, TetMesh
from .imaging import Camera, RotoConstraint
from .rig import Blendshapes, JawJoint, Rig


class FileFormatError(ValueError):
    """Raised for malformed asset or result files."""


def save_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def save_image(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit RGB PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((img * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """Read a PNG back to floats in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_obj(path, vertices: np.ndarray, faces: np.ndarray,
              colors: np.ndarray | None = None) -> None:
    """Plain OBJ; optional per-vertex RGB appended to each v line."""
    lines = []
    vertices = np.asarray(vertices, dtype=np.float64)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        for v, c in zip(vertices.tolist(), colors.tolist()):
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r} {c[0]!r} {c[1]!r} {c[2]!r}")
    else:
        for v in vertices.tolist():
            lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append("f " + " ".join(str(i + 1) for i in f))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    verts, faces, colors = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            nums = [float(p) for p in parts[1:]]
            verts.append(nums[:3])
            if len(nums) >= 6:
                colors.append(nums[3:6])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not verts:
        raise FileFormatError(f"no vertices in {path}")
    color_arr = np.asarray(colors) if len(colors) == len(verts) else None
    return np.asarray(verts), np.asarray(faces, dtype=np.int64), color_arr


def _muscle_payload(m: Muscle) -> dict:
    return {
        "name": m.name,
        "tets": m.tets.tolist(),
        "fibers": m.fibers.tolist(),
        "vertices": m.vertices.tolist(),
        "curve_rest": m.curve_rest.tolist(),
        "curve_tets": m.curve_embedding.tet_indices.tolist(),
        "curve_weights": m.curve_embedding.weights.tolist(),
        "k_m": m.k_m,
        "shortening": m.shortening,
        "smoothing": m.smoothing,
    }


def _muscle_from(payload: dict) -> Muscle:
    return Muscle(
        name=payload["name"], tets=np.asarray(payload["tets"]),
        fibers=np.asarray(payload["fibers"]),
        vertices=np.asarray(payload["vertices"]),
        curve_rest=np.asarray(payload["curve_rest"]),
        curve_embedding=Embedding(tet_indices=np.asarray(payload["curve_tets"]),
                                  weights=np.asarray(payload["curve_weights"])),
        k_m=payload["k_m"], shortening=payload["shortening"],
        smoothing=payload["smoothing"])


def _proxy_payload(proxy) -> dict:
    if isinstance(proxy, HalfSpaceProxy):
        return {"kind": "halfspace", "normal": proxy.normal.tolist(),
                "offset": proxy.offset, "stiffness": proxy.stiffness}
    if isinstance(proxy, SphereProxy):
        return {"kind": "sphere", "center": proxy.center.tolist(),
                "radius": proxy.radius, "stiffness": proxy.stiffness}
    raise FileFormatError(f"unknown proxy type {type(proxy).__name__}")


def _proxy_from(payload: dict):
    if payload["kind"] == "halfspace":
        return HalfSpaceProxy(normal=np.asarray(payload["normal"]),
                              offset=payload["offset"],
                              stiffness=payload["stiffness"])
    if payload["kind"] == "sphere":
        return SphereProxy(center=np.asarray(payload["center"]),
                           radius=payload["radius"],
                           stiffness=payload["stiffness"])
    raise FileFormatError(f"unknown proxy kind {payload['kind']!r}")


def save_camera(path, cam: Camera) -> None:
    save_json(path, {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
        "width": cam.width, "height": cam.height})


def load_camera(path) -> Camera:
    d = load_json(path)
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=np.asarray(d["rotation"]),
                  translation=np.asarray(d["translation"]),
                  width=d["width"], height=d["height"])


def save_roto(path, roto: RotoConstraint) -> None:
    save_json(path, {"constraints": [
        {"triangle": int(t), "barycentric": b.tolist(), "u": float(uv[0]),
         "v": float(uv[1])}
        for t, b, uv in zip(roto.triangles, roto.barycentric, roto.targets)]})


def load_roto(path) -> RotoConstraint:
    rows = load_json(path)["constraints"]
    return RotoConstraint(
        triangles=np.asarray([r["triangle"] for r in rows]),
        barycentric=np.asarray([r["barycentric"] for r in rows]),
        targets=np.asarray([[r["u"], r["v"]] for r in rows]))


def save_asset(directory, asset: Asset) -> None:
    """Write the whole asset as the JSON/OBJ/PNG bundle the CLI consumes."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_json(out / "spec.json", {
        "resolution": list(asset.spec.resolution),
        "extent": list(asset.spec.extent),
        "num_shapes": asset.spec.num_shapes,
        "num_muscles": asset.spec.num_muscles,
        "jaw_pivot": None if asset.spec.jaw_pivot is None else list(asset.spec.jaw_pivot),
        "seed": asset.spec.seed,
        "image_size": list(asset.spec.image_size),
        "camera_height": asset.spec.camera_height})
    save_json(out / "mesh.json", {
        "vertices": asset.mesh.vertices.tolist(),
        "tets": asset.mesh.tets.tolist(),
        "boundary_vertices": asset.mesh.boundary_vertices.tolist(),
        "boundary_triangles": asset.mesh.boundary_triangles.tolist(),
        "inner_boundary": asset.mesh.inner_boundary.tolist()})
    write_obj(out / "surface.obj", asset.surface.vertices, asset.surface.triangles)
    save_json(out / "rig.json", {
        "neutral": asset.rig.blendshapes.neutral.tolist(),
        "deltas": asset.rig.blendshapes.deltas.tolist(),
        "names": asset.rig.blendshapes.names,
        "pivot": asset.rig.jaw.pivot.tolist(),
        "skin_weights": asset.rig.skin_weights.tolist()})
    save_json(out / "anatomy.json",
              {"muscles": [_muscle_payload(m) for m in asset.muscles]})
    save_json(out / "proxies.json",
              {"proxies": [_proxy_payload(p) for p in asset.proxies]})
    save_camera(out / "camera.json", asset.camera)
    save_roto(out / "roto.json", asset.roto)
    save_json(out / "truth.json", {
        "gamma": asset.truth.gamma.tolist(),
        "albedo": asset.truth.albedo.tolist(),
        "w_image": asset.truth.w_image.tolist(),
        "w_geometry": asset.truth.w_geometry.tolist(),
        "w_pucker": asset.truth.w_pucker.tolist(),
        "theta": asset.truth.theta.tolist(),
        "t": asset.truth.t.tolist()})
    save_json(out / "regions.json", {
        "lip_tets": asset.lip_tets.tolist(),
        "lip_vertices": asset.lip_vertices.tolist()})
    plates = out / "plates"
    plates.mkdir(exist_ok=True)
    for name, image in asset.plates.items():
        save_image(plates / f"{name}.png", image)


def load_asset(directory) -> Asset:
    src = Path(directory)
    if not (src / "mesh.json").exists():
        raise FileFormatError(f"{src} is not an asset directory (mesh.json missing)")
    spec_d = load_json(src / "spec.json")
    spec = AssetSpec(resolution=tuple(spec_d["resolution"]),
                     extent=tuple(spec_d["extent"]),
                     num_shapes=spec_d["num_shapes"],
                     num_muscles=spec_d["num_muscles"],
                     jaw_pivot=None if spec_d["jaw_pivot"] is None
                     else tuple(spec_d["jaw_pivot"]),
                     seed=spec_d["seed"],
                     image_size=tuple(spec_d["image_size"]),
                     camera_height=spec_d["camera_height"])
    mesh_d = load_json(src / "mesh.json")
    mesh = TetMesh(vertices=np.asarray(mesh_d["vertices"]),
                   tets=np.asarray(mesh_d["tets"]),
                   boundary_vertices=np.asarray(mesh_d["boundary_vertices"]),
                   boundary_triangles=np.asarray(mesh_d["boundary_triangles"]),
                   inner_boundary=np.asarray(mesh_d["inner_boundary"]))
    verts, tris, _ = read_obj(src / "surface.obj")
    surface = SurfaceMesh(vertices=verts, triangles=tris)
    rig_d = load_json(src / "rig.json")
    rig = Rig(blendshapes=Blendshapes(neutral=np.asarray(rig_d["neutral"]),
                                      deltas=np.asarray(rig_d["deltas"]),
                                      names=list(rig_d["names"])),
              jaw=JawJoint(pivot=np.asarray(rig_d["pivot"])),
              skin_weights=np.asarray(rig_d["skin_weights"]))
    muscles = [_muscle_from(m) for m in load_json(src / "anatomy.json")["muscles"]]
    proxies = [_proxy_from(p) for p in load_json(src / "proxies.json")["proxies"]]
    cam = load_camera(src / "camera.json")
    roto = load_roto(src / "roto.json")
    t_d = load_json(src / "truth.json")
    truth = GroundTruth(gamma=np.asarray(t_d["gamma"]),
                        albedo=np.asarray(t_d["albedo"]),
                        w_image=np.asarray(t_d["w_image"]),
                        w_geometry=np.asarray(t_d["w_geometry"]),
                        w_pucker=np.asarray(t_d["w_pucker"]),
                        theta=np.asarray(t_d["theta"]), t=np.asarray(t_d["t"]))
    regions = load_json(src / "regions.json")
    plates = {p.stem: load_image(p) for p in sorted((src / "plates").glob("*.png"))}
    return Asset(spec=spec, mesh=mesh, surface=surface, rig=rig, muscles=muscles,
                 proxies=proxies, camera=cam, truth=truth, plates=plates,
                 roto=roto, lip_tets=np.asarray(regions["lip_tets"]),
                 lip_vertices=np.asarray(regions["lip_vertices"]))


def save_basis(path, basis: PrecomputedMuscleBasis) -> None:
    """Cache the precomputed morph/weight basis as a single .npz file."""
    arrays = {"fields": basis.fields, "vertex_weights": basis.vertex_weights,
              "shape_names": np.asarray(basis.shape_names),
              "num_muscles": np.asarray(len(basis.muscle_rest))}
    for i in range(len(basis.muscle_rest)):
        arrays[f"muscle_rest_{i}"] = basis.muscle_rest[i]
        arrays[f"muscle_shapes_{i}"] = basis.muscle_shapes[i]
        arrays[f"muscle_weights_{i}"] = basis.muscle_weights[i]
        arrays[f"curve_rest_{i}"] = basis.curve_rest[i]
        arrays[f"curve_shapes_{i}"] = basis.curve_shapes[i]
        arrays[f"curve_weights_{i}"] = basis.curve_weights[i]
    np.savez(path, **arrays)


def load_basis(path) -> PrecomputedMuscleBasis:
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"basis cache {path} not found")
    with np.load(path, allow_pickle=False) as data:
        count = int(data["num_muscles"])
        return PrecomputedMuscleBasis(
            shape_names=[str(s) for s in data["shape_names"]],
            fields=data["fields"], vertex_weights=data["vertex_weights"],
            muscle_rest=[data[f"muscle_rest_{i}"] for i in range(count)],
            muscle_shapes=[data[f"muscle_shapes_{i}"] for i in range(count)],
            muscle_weights=[data[f"muscle_weights_{i}"] for i in range(count)],
            curve_rest=[data[f"curve_rest_{i}"] for i in range(count)],
            curve_shapes=[data[f"curve_shapes_{i}"] for i in range(count)],
            curve_weights=[data[f"curve_weights_{i}"] for i in range(count)])


def asset_hash(directory) -> str:
    """SHA-256 over the asset files, stable across runs of the same asset."""
    digest = hashlib.sha256()
    root = Path(directory)
    for path in sorted(p for p in root.rglob("*") if p.is_file()
                       and p.suffix != ".npz"):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _report_payload(report: ConvergenceReport) -> dict:
    return {"converged": report.converged, "status": report.status,
            "iterations": report.iterations,
            "initial_cost": report.initial_cost,
            "final_cost": report.final_cost,
            "gradient_norm": report.gradient_norm,
            "gauss_newton_failures": report.gauss_newton_failures}


def _volume_payload(volume: VolumeReport | None) -> dict | None:
    if volume is None:
        return None
    return {"rest_total": volume.rest_total, "posed_total": volume.posed_total,
            "total_change": volume.total_change,
            "rest_lip": volume.rest_lip, "posed_lip": volume.posed_lip,
            "lip_change": volume.lip_change}


def fit_result_payload(fit) -> dict:
    """JSON-ready dict for any of the fit result dataclasses."""
    out = {"term_norms": {k: float(v) for k, v in fit.term_norms.items()}}
    for name in ("w", "theta", "t", "gamma", "w_initial"):
        if hasattr(fit, name):
            out[name] = np.asarray(getattr(fit, name)).tolist()
    if hasattr(fit, "albedo"):
        out["albedo"] = fit.albedo.tolist()
    if hasattr(fit, "rmse"):
        out["rmse"] = fit.rmse
    if hasattr(fit, "rms"):
        out["rms"] = fit.rms
    if hasattr(fit, "report"):
        out["report"] = _report_payload(fit.report)
    if hasattr(fit, "stage_reports"):
        out["stage_reports"] = [_report_payload(r) for r in fit.stage_reports]
    if getattr(fit, "activations", None) is not None:
        out["activations"] = fit.activations.tolist()
    if getattr(fit, "volume", None) is not None:
        out["volume"] = _volume_payload(fit.volume)
    return out
