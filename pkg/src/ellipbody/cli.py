"""Command-line entry points: render, fit, gradcheck, bench, register.

Exit codes: 0 ok, 1 check failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import body as body_mod
from . import geometry
from . import losses as losses_mod
from . import optim
from . import raster as raster_mod
from .camera import WeakPerspectiveCamera, camera_from_dict

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2


class InputError(RuntimeError):
    pass


def _load_json(path, what: str) -> dict | list:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} file not found: {p}")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {what} file {p}: {exc}") from exc


def _load_params(path) -> body_mod.EllipBodyParams:
    doc = _load_json(path, "params")
    try:
        return body_mod.EllipBodyParams.from_dict(doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"invalid params file {path}: {exc}") from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError as exc:
        raise InputError(f"--size must look like 256x256, got '{text}'") from exc
    if w < 1 or h < 1:
        raise InputError("--size dimensions must be positive")
    return w, h


def _fit_config(args) -> optim.FitConfig:
    overrides: dict = {}
    if args.config:
        doc = _load_json(args.config, "config")
        if not isinstance(doc, dict):
            raise InputError("config file must hold a JSON object")
        overrides.update(doc)
    try:
        config = optim.FitConfig.from_dict(overrides)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    width, height = _parse_size(args.size)
    config.width = width
    config.height = height
    if args.subdiv is not None:
        config.subdivision = args.subdiv
    if args.lambda_z is not None:
        config.lambda_z = args.lambda_z
    if args.grouping is not None:
        config.grouping = args.grouping
    if args.freeze_camera is not None:
        config.freeze_camera = args.freeze_camera
    if args.seed is not None:
        config.seed = args.seed
    return config


def _write_render_outputs(raster, class_names, tree, out_dir: Path, prefix: str = "") -> None:
    labels = raster_mod.label_map(raster)
    raster_mod.save_label_png(labels, len(class_names), out_dir / f"{prefix}labels.png")
    raster_mod.save_palette_json(class_names, out_dir / f"{prefix}palette.json")
    parts_dir = out_dir / f"{prefix}parts"
    parts_dir.mkdir(exist_ok=True)
    for c, name in enumerate(class_names):
        raster_mod.save_label_png(
            raster.class_maps[c] * (c + 1), len(class_names),
            parts_dir / f"class_{c:02d}_{name}.png",
        )
    joints = [
        {"name": tree.joint_names[i], "u": float(raster.joints_2d[i, 0]),
         "v": float(raster.joints_2d[i, 1]), "confidence": 1.0}
        for i in range(len(tree.joint_names))
    ]
    with open(out_dir / f"{prefix}joints_2d.json", "w") as fh:
        json.dump(joints, fh, indent=1)


def cmd_render(args) -> int:
    params = _load_params(args.params)
    if args.camera:
        cam = camera_from_dict(_load_json(args.camera, "camera"))
        if not isinstance(cam, WeakPerspectiveCamera):
            raise InputError("render uses the weak-perspective camera form {s, tx, ty}")
        params.cam = cam
    width, height = _parse_size(args.size)
    tree = body_mod.default_tree()
    _, class_names = body_mod.class_grouping(args.grouping or "20")
    partset = body_mod.build(params, args.subdiv if args.subdiv is not None else 1,
                             grouping=args.grouping or "20")
    raster = raster_mod.render(partset, params.cam, width, height)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_render_outputs(raster, class_names, tree, out_dir)
    geometry.save_obj(optim.partset_surface(partset), out_dir / "body.obj")
    params.save(out_dir / "params.json")
    print(f"rendered {width}x{height}, {len(class_names)} classes -> {out_dir}")
    return EXIT_OK


def _load_targets(args, config: optim.FitConfig, tree) -> losses_mod.FitTargets:
    kp_doc = _load_json(args.keypoints, "keypoints")
    if not isinstance(kp_doc, list):
        raise InputError("keypoints file must hold a JSON list of {name, u, v, confidence}")
    keypoints = np.zeros((tree.n_joints, 2))
    conf = np.zeros(tree.n_joints)
    for entry in kp_doc:
        for field in ("name", "u", "v"):
            if field not in entry:
                raise InputError(f"keypoint entry missing field '{field}': {entry}")
        if entry["name"] not in tree.joint_names:
            raise InputError(f"unknown joint name '{entry['name']}'")
        j = tree.joint_names.index(entry["name"])
        keypoints[j] = (entry["u"], entry["v"])
        conf[j] = entry.get("confidence", 1.0)

    class_maps = None
    if args.maps:
        palette_path = args.palette
        if palette_path is None:
            raise InputError("--maps requires --palette")
        class_names = raster_mod.load_palette_json(Path(palette_path))
        labels = raster_mod.load_label_png(Path(args.maps))
        if labels.shape != (config.height, config.width):
            raise InputError(
                f"label map resolution {labels.shape[::-1]} does not match --size "
                f"{config.width}x{config.height}"
            )
        class_maps = raster_mod.label_to_class_maps(labels, len(class_names))
    return losses_mod.FitTargets(keypoints=keypoints, keypoint_conf=conf, class_maps=class_maps)


def cmd_fit(args) -> int:
    config = _fit_config(args)
    tree = body_mod.default_tree()
    if args.maps and not Path(args.maps).exists():
        raise InputError(f"label map file not found: {args.maps}")
    targets = _load_targets(args, config, tree)
    init = _load_params(args.init) if args.init else body_mod.mean_params()
    _, class_names = body_mod.class_grouping(config.grouping)
    if targets.class_maps is not None and len(targets.class_maps) != len(class_names):
        raise InputError(
            f"target maps have {len(targets.class_maps)} classes, grouping "
            f"'{config.grouping}' expects {len(class_names)}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    before = raster_mod.render(
        body_mod.build(init, config.subdivision, grouping=config.grouping),
        init.cam, config.width, config.height,
    )
    _write_render_outputs(before, class_names, tree, out_dir, prefix="before_")
    try:
        fitted, trace = optim.fit(init, targets, config)
    except optim.FitDivergence as exc:
        optim.save_trace(exc.trace, out_dir / "trace.csv")
        print(f"fit diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    fitted.save(out_dir / "fitted_params.json")
    optim.save_trace(trace, out_dir / "trace.csv")
    after = raster_mod.render(
        body_mod.build(fitted, config.subdivision, grouping=config.grouping),
        fitted.cam, config.width, config.height,
    )
    _write_render_outputs(after, class_names, tree, out_dir, prefix="after_")
    print(f"fit finished after {len(trace)} iterations; best total "
          f"{min(t['total'] for t in trace):.6g} -> {out_dir}")
    return EXIT_OK


def _gradcheck_rows(seed: int) -> list[tuple[str, float, float, bool]]:
    """(name, value, tolerance, ok) rows for the smooth-term and fixture checks."""
    rng = np.random.default_rng(seed)
    rows = []

    def fd_check(name, value_fn, grad_fn, x0, h=1e-6, tol=1e-4):
        worst = 0.0
        g = grad_fn(x0)
        flat = x0.ravel()
        idx = rng.choice(flat.size, size=min(25, flat.size), replace=False)
        for i in idx:
            xp = flat.copy(); xp[i] += h
            xm = flat.copy(); xm[i] -= h
            fd = (value_fn(xp.reshape(x0.shape)) - value_fn(xm.reshape(x0.shape))) / (2 * h)
            scale = max(abs(fd), abs(g.ravel()[i]), 1e-8)
            worst = max(worst, abs(fd - g.ravel()[i]) / scale)
        rows.append((name, worst, tol, worst < tol))

    target_j = rng.normal(size=(21, 3))
    joints = target_j + rng.normal(scale=0.1, size=(21, 3))
    fd_check("loss_3d", lambda x: losses_mod.loss_3d(x, target_j),
             lambda x: losses_mod.grad_loss_3d(x, target_j), joints)

    target_k = rng.normal(size=(21, 2))
    s2d = target_k + rng.normal(scale=0.05, size=(21, 2))
    conf = rng.uniform(0.2, 1.0, 21)
    fd_check("loss_proj", lambda x: losses_mod.loss_proj(x, target_k, conf),
             lambda x: losses_mod.grad_loss_proj(x, target_k, conf), s2d)

    mean = body_mod.mean_params()
    l = mean.l * rng.uniform(0.9, 1.1, 12)
    fd_check("loss_l_reg", lambda x: losses_mod.loss_shape_reg(x, mean.t, mean.l, mean.t)[0],
             lambda x: 2 * (x - mean.l), l)
    t = mean.t * rng.uniform(0.9, 1.1, 15)
    fd_check("loss_t_reg", lambda x: losses_mod.loss_shape_reg(mean.l, x, mean.l, mean.t)[1],
             lambda x: 2 * (x - mean.t), t)

    specs = body_mod.ellipsoid_specs(mean)
    # points scattered around part centers so a good share lies inside
    centers = np.stack([s.center for s in specs])
    pts = centers[rng.integers(0, len(centers), 40)] + rng.normal(scale=0.05, size=(40, 3))
    if not (losses_mod.loss_pen(pts, specs) > 0):
        raise RuntimeError("penetration check points missed every ellipsoid")
    fd_check("loss_pen", lambda x: losses_mod.loss_pen(x, specs),
             lambda x: losses_mod.grad_loss_pen(x, specs), pts)

    ref = rng.normal(size=(60, 3))
    pts2 = rng.normal(size=(50, 3))
    corr = losses_mod.icp_correspondences(pts2, ref)
    fd_check("loss_icp_frozen", lambda x: losses_mod.loss_icp_frozen(x, ref, corr),
             lambda x: losses_mod.grad_loss_icp_frozen(x, ref, corr), pts2)

    # vertex-to-parameter Jacobian against central differences
    params = mean.copy()
    params.r = rng.uniform(-0.4, 0.4, (20, 3))
    bj = body_mod.build_jacobian(params, 0)
    vec = body_mod.pack_params(params)
    worst = 0.0
    for i in rng.choice(body_mod.N_PARAMS, size=20, replace=False):
        h = 1e-6
        vp = vec.copy(); vp[i] += h
        vm = vec.copy(); vm[i] -= h
        sp = body_mod.build(body_mod.unpack_params(vp, params), 0)
        sm = body_mod.build(body_mod.unpack_params(vm, params), 0)
        for k in range(20):
            fd = (sp.parts[k].vertices - sm.parts[k].vertices) / (2 * h)
            an = bj.vertex_jacobians[k][:, i, :]
            scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-8)
            worst = max(worst, np.abs(fd - an).max() / scale)
    rows.append(("vertex_jacobian", worst, 1e-4, worst < 1e-4))

    # two-pixel edge-sweep fixture: slope magnitude 1/2
    tri = np.array([[4.5, 0.0, 1.0], [4.5, 8.0, 1.0], [0.5, 4.0, 1.0]])
    proj = raster_mod.ProjectedParts(
        pix=[tri.copy()], cam_pts=[tri.copy()],
        faces=[np.array([[0, 1, 2]], dtype=np.int32)],
        part_to_class=np.array([0], dtype=np.int32), n_classes=1, width=8, height=8,
    )
    out = raster_mod.rasterize(proj)
    targets = out.class_maps.copy()
    targets[0, 3, 6] = 1
    g = raster_mod.backward_xy(out, targets, proj)
    err = float(np.abs(np.abs(g.per_part[0][:, 0]) - 0.5).max())
    rows.append(("sweep_two_pixel", err, 1e-12, err < 1e-12))

    # fully-occluded face: x/y gradients exactly zero
    back = np.array([[4.0, 4.0, 2.0], [12.0, 4.0, 2.0], [8.0, 12.0, 2.0]])
    front = np.array([[2.0, 2.0, 1.0], [14.0, 2.0, 1.0], [8.0, 14.0, 1.0]])
    proj2 = raster_mod.ProjectedParts(
        pix=[back, front], cam_pts=[back.copy(), front.copy()],
        faces=[np.array([[0, 1, 2]], dtype=np.int32)] * 2,
        part_to_class=np.array([0, 1], dtype=np.int32), n_classes=2, width=16, height=16,
    )
    out2 = raster_mod.rasterize(proj2)
    targets2 = np.zeros_like(out2.class_maps)
    targets2[0] = out2.class_maps[1]
    g2 = raster_mod.backward_xy(out2, targets2, proj2)
    err2 = float(np.abs(g2.per_part[0][:, :2]).max())
    rows.append(("occlusion_mask_zero", err2, 0.0, err2 == 0.0))

    # unit depth-gradient fixture: log(2)
    ev = raster_mod.OcclusionEvent(
        pixel=(0, 0), part=0, face=0, vertex_ids=np.array([0, 1, 2]),
        occluder_part=1, occluder_face=0, q=np.array([1.0, 0.0, 0.0]),
        m0=np.zeros(3), dz=1.0, residual=1.0,
    )
    cam_pts = np.array([[1.0, 0, 0], [0.5, 0.5, 0], [0.5, -0.5, 0]])
    proj3 = raster_mod.ProjectedParts(
        pix=[cam_pts.copy()], cam_pts=[cam_pts],
        faces=[np.array([[0, 1, 2]], dtype=np.int32)],
        part_to_class=np.array([0], dtype=np.int32), n_classes=1, width=4, height=4,
    )
    gz = raster_mod.backward_z([ev], 1.0, proj3)
    err3 = float(abs(gz.per_part[0][0, 2] - np.log(2.0)))
    rows.append(("depth_unit_log2", err3, 1e-9, err3 < 1e-9))
    return rows


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = _gradcheck_rows(seed)
    width = max(len(r[0]) for r in rows)
    all_ok = True
    for name, value, tol, ok in rows:
        all_ok &= ok
        print(f"{name:<{width}}  err={value:.3e}  tol={tol:.0e}  {'PASS' if ok else 'FAIL'}")
    print("gradcheck:", "all checks passed" if all_ok else "FAILURES present")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    levels = [int(x) for x in args.levels.split(",")]
    if any(lv < 0 or lv > 3 for lv in levels):
        raise InputError("--levels entries must be within 0..3")
    width, height = _parse_size(args.size)
    params = body_mod.mean_params()
    targets_raster = raster_mod.render(body_mod.build(params, 1), params.cam, width, height)
    rng = np.random.default_rng(args.seed or 0)
    perturbed = params.copy()
    perturbed.r = perturbed.r + rng.uniform(-0.1, 0.1, (20, 3))
    targets = losses_mod.FitTargets(
        keypoints=targets_raster.joints_2d.copy(),
        keypoint_conf=np.ones(len(targets_raster.joints_2d)),
        class_maps=targets_raster.class_maps.copy(),
    )
    rows = []
    for level in levels:
        expected = 20 * 4**level
        faces = body_mod.unit_icosphere(level).n_faces
        if faces != expected:
            raise RuntimeError(f"face count {faces} != {expected} at level {level}")
        ctx = losses_mod.FitContext(width=width, height=height, subdivision=level)
        losses_mod.fit_objective(perturbed, targets, losses_mod.LossWeights(), ctx)  # warm-up
        times = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            losses_mod.fit_objective(perturbed, targets, losses_mod.LossWeights(), ctx)
            times.append(time.perf_counter() - t0)
        rows.append({
            "level": level,
            "faces_per_part": faces,
            "total_faces": faces * 20,
            "iter_seconds": float(np.median(times)),
        })
        print(f"E{level}: {faces} faces/part, median iteration {rows[-1]['iter_seconds']*1e3:.1f} ms")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("level,faces_per_part,total_faces,iter_seconds\n")
            for row in rows:
                fh.write(f"{row['level']},{row['faces_per_part']},{row['total_faces']},{row['iter_seconds']:.6f}\n")
        print(f"wrote {out}")
    return EXIT_OK


def cmd_register(args) -> int:
    target_path = Path(args.target)
    if not target_path.exists():
        raise InputError(f"target OBJ not found: {target_path}")
    try:
        target = geometry.load_obj(target_path)
    except (ValueError, OSError) as exc:
        raise InputError(f"unreadable OBJ {target_path}: {exc}") from exc
    fitted = _load_params(args.params)
    overrides = {}
    if args.config:
        doc = _load_json(args.config, "config")
        if not isinstance(doc, dict):
            raise InputError("config file must hold a JSON object")
        overrides = doc
    try:
        config = optim.RegisterConfig.from_dict(overrides)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        deformed, trace = optim.register(target, fitted, config)
    except optim.FitDivergence as exc:
        optim.save_trace(exc.trace, out_dir / "trace.csv")
        print(f"registration diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    geometry.save_obj(deformed, out_dir / "deformed.obj")
    optim.save_trace(trace, out_dir / "trace.csv")
    print(f"registration finished; final total {trace[-1]['total']:.6g} -> {out_dir}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--size", default="256x256", help="render size WxH (default 256x256)")
    parser.add_argument("--subdiv", type=int, default=None, help="icosphere subdivision level (default 1)")
    parser.add_argument("--lambda-z", type=float, default=None, dest="lambda_z",
                        help="scale of the depth-ordering gradient")
    parser.add_argument("--freeze-camera", dest="freeze_camera", action="store_true", default=None)
    parser.add_argument("--no-freeze-camera", dest="freeze_camera", action="store_false")
    parser.add_argument("--grouping", choices=("20", "14"), default=None,
                        help="segmentation class grouping preset")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="JSON file overriding fit config fields")
    parser.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ellipbody",
        description="Ellipsoid body model: part-map rendering, fitting, registration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render label maps, joints and mesh from a params file")
    p.add_argument("--params", required=True, help="EllipBody params JSON")
    p.add_argument("--camera", default=None, help="camera JSON {s, tx, ty}")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit body parameters to keypoints and part maps")
    p.add_argument("--keypoints", required=True, help="JSON list of {name, u, v, confidence}")
    p.add_argument("--maps", default=None, help="indexed label-map PNG")
    p.add_argument("--palette", default=None, help="palette JSON describing the label classes")
    p.add_argument("--init", default=None, help="initial params JSON (default: mean shape)")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", help="finite-difference and fixture checks of all gradients")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-iteration timing across subdivision levels")
    p.add_argument("--levels", default="0,1,2,3")
    p.add_argument("--iters", type=int, default=5)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("register", help="deform a target OBJ onto a fitted body")
    p.add_argument("--target", required=True, help="target mesh OBJ")
    p.add_argument("--params", required=True, help="fitted EllipBody params JSON")
    _add_common(p)
    p.set_defaults(func=cmd_register)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
