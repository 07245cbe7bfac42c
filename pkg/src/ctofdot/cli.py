"""Command-line pipeline driver.

One executable, subcommands per stage:

    ctofdot simulate CONFIG --out transients.dott
    ctofdot kernel CONFIG --backend mc|analytic --out kernel.dott
    ctofdot reconstruct --measurements m.dott --operator k.dott --out DIR
    ctofdot conditioning CONFIG --cases dot,tofdot,ctofdot --out report.csv
    ctofdot benchmark --sweep sources --out runtimes.csv
    ctofdot multiplex-study CONFIG --out curves.csv

Configs are a single JSON document with sections
{medium, grid, scan, mc, acquisition, solver, phantom, kernel}; the
schema is versioned and fail-closed (unknown fields are rejected).
Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, analytic_model, mc_transport, noise_model, phantoms
from .core_types import (FluorophoreModel, OpticalProperties, ScanConfig,
                         SlabMedium, TimeAxis, TransientSet, VolumeImage,
                         VoxelGrid, validate_scene)
from .forward_ops import (ConvOperator, DenseOperator, KernelStack,
                          MeasurementIndex, MultiplexMatrix, build_multiplex)
from .inverse_solver import (OperatorError, SolveParams, StepSizeError,
                             depth_weighted_lambda, fista, lambda_max,
                             solve_multiplexed)
from .tensor_io import TensorIoError, read_tensor, write_tensor

CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC2 = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

_PROPS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mu_s"],
    "properties": {"mu_s": _NUM, "mu_a": _NUM, "g": _NUM, "n": _NUM},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "medium", "scan"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "medium": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mu_s", "thickness"],
            "properties": {
                "mu_s": _NUM, "mu_a": _NUM, "g": _NUM, "n": _NUM,
                "thickness": _POS,
                "lateral_extent": _VEC2,
                "fluorescence": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["lifetime_ns", "emission"],
                    "properties": {
                        "lifetime_ns": _POS,
                        "emission": _PROPS_SCHEMA,
                        "excitation_rejection": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dims", "pitch"],
            "properties": {
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 1},
                         "minItems": 3, "maxItems": 3},
                "pitch": _VEC3,
                "origin": _VEC3,
                "z0": _NUM,
            },
        },
        "scan": {
            "type": "object",
            "additionalProperties": False,
            "required": ["time"],
            "properties": {
                "type": {"enum": ["confocal_grid", "lists"]},
                "nx": {"type": "integer", "minimum": 1},
                "ny": {"type": "integer", "minimum": 1},
                "pitch": _POS,
                "center": _VEC2,
                "sources": {"type": "array", "items": _VEC2},
                "detectors": {"type": "array", "items": _VEC2},
                "confocal": {"type": "boolean"},
                "time": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n_bins", "bin_width"],
                    "properties": {
                        "n_bins": {"type": "integer", "minimum": 1},
                        "bin_width": _POS,
                        "gate_start": _NUM,
                    },
                },
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_photons": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "aperture": _POS,
                "fresnel": {"type": "boolean"},
            },
        },
        "acquisition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "integration_time_ms": _POS,
                "max_count_rate": {"type": "number", "minimum": 0},
                "dark_count_rate": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
                "source_rate": _POS,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "minimum": 0},
                "lambda_per_depth": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "lambda_depth_weighted": {"type": "boolean"},
                "max_iters": {"type": "integer", "minimum": 1},
                "nonneg": {"type": "boolean"},
                "tolerance": {"type": "number", "minimum": 0},
                "step_size": _POS,
            },
        },
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["two_lines", "letter_r", "discs", "point"]},
                "line_width": _POS,
                "separation": {"type": "number", "minimum": 0},
                "depth_index": {"type": "integer", "minimum": 0},
                "amplitude": _NUM,
                "discs": {"type": "array", "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["center", "diameter", "depth"],
                    "properties": {"center": _VEC2, "diameter": _POS,
                                   "depth": _POS, "value": _NUM},
                }},
                "index": {"type": "array", "items": {"type": "integer"},
                          "minItems": 3, "maxItems": 3},
            },
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["radius", "depths"],
            "properties": {
                "radius": {"type": "integer", "minimum": 1},
                "depths": {"type": "array", "items": _POS, "minItems": 1},
                "pitch": _POS,
                "voxel_depth": _POS,
                "symmetrize": {"type": "boolean"},
            },
        },
    },
}


def load_config(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    import jsonschema
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = "; ".join(f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                         for e in errors)
        raise ConfigError(msgs)
    return cfg


def build_medium(cfg: dict) -> SlabMedium:
    m = cfg["medium"]
    props = OpticalProperties(m["mu_s"], m.get("mu_a", 0.0), m.get("g", 0.0), m.get("n", 1.4))
    fluor = None
    if "fluorescence" in m:
        f = m["fluorescence"]
        e = f["emission"]
        fluor = FluorophoreModel(f["lifetime_ns"],
                                 OpticalProperties(e["mu_s"], e.get("mu_a", 0.0),
                                                   e.get("g", 0.0), e.get("n", 1.4)),
                                 f.get("excitation_rejection", 0.0))
    return SlabMedium(props, m["thickness"], tuple(m.get("lateral_extent", (50.0, 50.0))), fluor)


def build_time_axis(cfg: dict) -> TimeAxis:
    t = cfg["scan"]["time"]
    return TimeAxis(t["n_bins"], t["bin_width"], t.get("gate_start", 0.0))


def build_scan(cfg: dict) -> ScanConfig:
    s = cfg["scan"]
    axis = build_time_axis(cfg)
    kind = s.get("type", "confocal_grid")
    if kind == "confocal_grid":
        for key in ("nx", "ny", "pitch"):
            if key not in s:
                raise ConfigError(f"scan.{key} required for confocal_grid scans")
        return ScanConfig.confocal_grid(s["nx"], s["ny"], s["pitch"], axis,
                                        tuple(s.get("center", (0.0, 0.0))))
    if "sources" not in s or "detectors" not in s:
        raise ConfigError("scan.sources and scan.detectors required for list scans")
    return ScanConfig(np.asarray(s["sources"]), np.asarray(s["detectors"]),
                      axis, s.get("confocal", False))


def build_grid(cfg: dict) -> VoxelGrid:
    if "grid" not in cfg:
        raise ConfigError("config needs a grid section for this command")
    g = cfg["grid"]
    if "origin" in g:
        return VoxelGrid(tuple(g["dims"]), tuple(g["pitch"]), tuple(g["origin"]))
    return VoxelGrid.centered(g["dims"], tuple(g["pitch"]), g.get("z0", 0.0))


def build_mc_settings(cfg: dict, photons_override=None, seed_override=None,
                      record_jacobian=False) -> mc_transport.McSettings:
    m = cfg.get("mc", {})
    n = photons_override if photons_override is not None else m.get("n_photons", 1_000_000)
    seed = seed_override if seed_override is not None else m.get("seed", 0)
    if n < 1:
        raise ConfigError("mc.n_photons must be >= 1")
    return mc_transport.McSettings(n_photons=int(n), seed=int(seed),
                                   record_jacobian=record_jacobian,
                                   fresnel_boundaries=m.get("fresnel", True))


def build_solver(cfg: dict, kernels: KernelStack | None = None) -> SolveParams:
    s = cfg.get("solver", {})
    lam = s.get("lambda", 0.0)
    if "lambda_per_depth" in s:
        lam = s["lambda_per_depth"]
    elif s.get("lambda_depth_weighted") and kernels is not None:
        lam = depth_weighted_lambda(s.get("lambda", 0.0), kernels)
    return SolveParams(lambda_per_depth=lam,
                       max_iters=s.get("max_iters", 200),
                       step_size=s.get("step_size"),
                       nonneg=s.get("nonneg", False),
                       tolerance=s.get("tolerance", 1e-6))


def build_phantom(cfg: dict, grid: VoxelGrid) -> VolumeImage:
    if "phantom" not in cfg:
        raise ConfigError("config needs a phantom section for this command")
    p = cfg["phantom"]
    kind = p["type"]
    if kind == "two_lines":
        return analysis.two_line_phantom(grid, p.get("line_width", 0.5),
                                         p.get("separation", 0.5),
                                         p.get("depth_index", 0),
                                         p.get("amplitude", 1.0))
    if kind == "letter_r":
        return phantoms.letter_r(grid, p.get("depth_index", 0), p.get("amplitude", 1.0))
    if kind == "discs":
        specs = [((d["center"][0], d["center"][1]), d["diameter"], d["depth"],
                  d.get("value", 1.0)) for d in p.get("discs", [])]
        return phantoms.discs(grid, specs)
    if kind == "point":
        return phantoms.point(grid, tuple(p.get("index", (0, 0, 0))), p.get("amplitude", 1.0))
    raise ConfigError(f"unknown phantom type {kind!r}")


def _scene_meta(cfg: dict, **extra) -> dict:
    meta = {"units": "mm,ps,mm^-1", "producer": f"ctofdot {CONFIG_VERSION}"}
    for key in ("medium", "scan", "mc"):
        if key in cfg:
            meta[key] = cfg[key]
    meta.update(extra)
    return meta


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit P5 image, normalized to the array maximum."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else np.clip(img / peak, 0.0, 1.0)
    data = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# kernel / operator file handling


def write_kernel_stack(path, stack: KernelStack, meta: dict) -> None:
    meta = dict(meta)
    meta.update({
        "container": "kernel_stack",
        "depths": list(map(float, stack.depth_list)),
        "pitch": float(stack.pitch),
        "time": {"n_bins": stack.time_axis.n_bins,
                 "bin_width": stack.time_axis.bin_width,
                 "gate_start": stack.time_axis.gate_start},
    })
    write_tensor(path, stack.kernels, meta)


def read_kernel_stack(path) -> tuple[KernelStack, dict]:
    tensor, meta = read_tensor(path)
    if meta.get("container") != "kernel_stack":
        raise ConfigError(f"{path} is not a kernel stack container")
    t = meta["time"]
    axis = TimeAxis(t["n_bins"], t["bin_width"], t.get("gate_start", 0.0))
    return KernelStack(tensor, np.asarray(meta["depths"]), meta["pitch"], axis), meta


def write_dense_operator(path, op: DenseOperator, meta: dict) -> None:
    meta = dict(meta)
    meta.update({
        "container": "dense_operator",
        "rows": {"src": op.rows.src.tolist(), "det": op.rows.det.tolist(),
                 "tbin": op.rows.tbin.tolist(), "n_sources": op.rows.n_sources,
                 "n_detectors": op.rows.n_detectors, "n_bins": op.rows.n_bins,
                 "layout": op.rows.layout},
        "grid": {"dims": list(op.grid.dims), "pitch": list(op.grid.pitch),
                 "origin": list(op.grid.origin)},
    })
    write_tensor(path, op.matrix, meta)


def read_dense_operator(path) -> tuple[DenseOperator, dict]:
    tensor, meta = read_tensor(path)
    if meta.get("container") != "dense_operator":
        raise ConfigError(f"{path} is not a dense operator container")
    r = meta["rows"]
    rows = MeasurementIndex(np.asarray(r["src"]), np.asarray(r["det"]),
                            np.asarray(r["tbin"]), r["n_sources"],
                            r["n_detectors"], r["n_bins"], r["layout"])
    g = meta["grid"]
    grid = VoxelGrid(tuple(g["dims"]), tuple(g["pitch"]), tuple(g["origin"]))
    return DenseOperator(tensor, rows, grid), meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    medium = build_medium(cfg)
    scan = build_scan(cfg)
    errors = validate_scene(medium, None, scan)
    if errors:
        raise ConfigError("; ".join(errors))
    if args.backend == "mc":
        settings = build_mc_settings(cfg, args.photons, args.seed)
        aperture = cfg.get("mc", {}).get("aperture", 1.0)
        ts = mc_transport.simulate_transients(medium, scan, settings,
                                              detector_aperture=aperture)
        meta = _scene_meta(cfg, seed=settings.seed, n_photons=settings.n_photons,
                           backend="mc", warnings=list(ts.warnings))
    else:
        grid = build_grid(cfg)
        stack = _analytic_stack(cfg, medium, grid)
        truth = build_phantom(cfg, grid)
        op = ConvOperator(stack, grid)
        ts = TransientSet(np.maximum(op.apply(truth.values), 0.0), scan)
        meta = _scene_meta(cfg, backend="analytic")
    write_tensor(args.out, ts.values, meta)
    print(f"wrote {args.out}: transients {ts.values.shape}")
    return EXIT_OK


def _analytic_stack(cfg, medium, grid) -> KernelStack:
    k = cfg.get("kernel")
    if k is None:
        raise ConfigError("config needs a kernel section for analytic forward models")
    axis = build_time_axis(cfg)
    params = analytic_model.DiffusionParams.from_medium(
        medium, matched_boundary=not cfg.get("mc", {}).get("fresnel", True))
    return analytic_model.psf_analytic(k["depths"], axis, params, medium,
                                       k["radius"], k.get("pitch", grid.pitch[0]),
                                       k.get("voxel_depth"))


def cmd_kernel(args) -> int:
    cfg = load_config(args.config)
    medium = build_medium(cfg)
    k = cfg.get("kernel")
    if k is None:
        raise ConfigError("config needs a kernel section")
    depths = [float(d) for d in args.depths.split(",")] if args.depths else k["depths"]
    if any(d <= 0 or d >= medium.thickness for d in depths):
        raise ConfigError("kernel depths must lie inside the slab")
    axis = build_time_axis(cfg)
    pitch = k.get("pitch", cfg["scan"].get("pitch", 1.0))
    if args.backend == "analytic":
        params = analytic_model.DiffusionParams.from_medium(
            medium, matched_boundary=not cfg.get("mc", {}).get("fresnel", True))
        stack = analytic_model.psf_analytic(depths, axis, params, medium,
                                            k["radius"], pitch, k.get("voxel_depth"))
        meta = _scene_meta(cfg, backend="analytic")
    else:
        settings = build_mc_settings(cfg, args.photons, args.seed, record_jacobian=True)
        stack = mc_transport.estimate_psf_mc(
            medium, depths, axis, settings, k["radius"], pitch,
            detector_aperture=cfg.get("mc", {}).get("aperture", 1.0),
            voxel_depth=k.get("voxel_depth"), symmetrize=k.get("symmetrize", False))
        meta = _scene_meta(cfg, backend="mc", seed=settings.seed,
                           n_photons=settings.n_photons)
    write_kernel_stack(args.out, stack, meta)
    print(f"wrote {args.out}: kernel stack {stack.kernels.shape}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    meas, m_meta = read_tensor(args.measurements)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lam: object
    if args.lambda_per_depth:
        lam = [float(x) for x in args.lambda_per_depth.split(",")]
    else:
        lam = args.lam
    try:
        _, op_meta = read_tensor(args.operator)
    except TensorIoError:
        raise
    if op_meta.get("container") == "kernel_stack":
        stack, _ = read_kernel_stack(args.operator)
        if meas.ndim != 2:
            raise ConfigError("kernel-stack reconstruction expects confocal (pairs, bins) data")
        n_pairs = meas.shape[0]
        side = int(round(np.sqrt(n_pairs)))
        if side * side != n_pairs:
            raise ConfigError("confocal scan is not a square raster")
        grid = VoxelGrid.centered((side, side, stack.n_depths),
                                  (stack.pitch, stack.pitch,
                                   stack.pitch if stack.n_depths == 1 else
                                   float(np.diff(stack.depth_list).mean())),
                                  z0=float(stack.depth_list[0]) - stack.pitch / 2.0)
        op = ConvOperator(stack, grid)
        if args.lambda_depth_weighted:
            lam = depth_weighted_lambda(float(args.lam), stack)
    else:
        dense, _ = read_dense_operator(args.operator)
        op = dense
    if args.lambda_rel is not None:
        scale = lambda_max(op, meas) * args.lambda_rel
        if args.lambda_depth_weighted and op_meta.get("container") == "kernel_stack":
            schedule = depth_weighted_lambda(1.0, stack)
            lam = scale * schedule / schedule.min()
        else:
            lam = scale
    params = SolveParams(lambda_per_depth=lam, max_iters=args.iters,
                         nonneg=args.nonneg, tolerance=args.tolerance)
    if args.multiplex:
        s_tensor, s_meta = read_tensor(args.multiplex)
        S = MultiplexMatrix(s_tensor, s_meta.get("scheme", "identity"))
        recon, report = solve_multiplexed(S, op, meas, params)
    else:
        recon, report = fista(op, meas.reshape(op.meas_shape), params)
    vol = recon.values if isinstance(recon, VolumeImage) else np.asarray(recon)
    write_tensor(out_dir / "mu.dott", vol, {"container": "volume",
                                            "source_measurements": str(args.measurements)})
    for zi in range(vol.shape[2] if vol.ndim == 3 else 1):
        layer = vol[:, :, zi] if vol.ndim == 3 else vol
        write_pgm(out_dir / f"mu_z{zi:02d}.pgm", layer.T)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"wrote {out_dir}/mu.dott ({report.iterations_run} iterations, "
          f"converged={report.converged})")
    return EXIT_OK


def _derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation with no fixed points (arbitrary-separation pairs)."""
    from .rng import uniform_field
    order = np.argsort(uniform_field(seed, 31, (n,)))
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, 1)
    return perm


def cmd_conditioning(args) -> int:
    cfg = load_config(args.config)
    medium = build_medium(cfg)
    scan = build_scan(cfg)
    grid = build_grid(cfg)
    errors = validate_scene(medium, grid, scan)
    if errors:
        raise ConfigError("; ".join(errors))
    settings = build_mc_settings(cfg, args.photons, args.seed, record_jacobian=True)
    aperture = cfg.get("mc", {}).get("aperture", 1.0)
    cases = [c.strip() for c in args.cases.split(",") if c.strip()]
    valid = {"dot", "tofdot", "ctofdot"}
    if not cases or set(cases) - valid:
        raise ConfigError(f"cases must be a subset of {sorted(valid)}")
    ops = build_conditioning_operators(medium, scan, grid, settings, aperture, cases)
    report = analysis.conditioning_report(ops, floor=args.floor)
    rows = [{"case": name, **vals} for name, vals in report.items()]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["case", "min_sv_above_floor",
                                                "count_above_floor"])
        writer.writeheader()
        writer.writerows(rows)
    spectra_path = Path(args.out).with_suffix(".spectra.csv")
    with open(spectra_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "index", "normalized_sv"])
        for name, op in ops.items():
            for i, sv in enumerate(analysis.singular_spectrum(op)):
                writer.writerow([name, i, f"{sv:.10g}"])
    for row in rows:
        print(f"{row['case']}: min_sv={row['min_sv_above_floor']:.4g} "
              f"count={row['count_above_floor']}")
    return EXIT_OK


def _offset_neighbors(scan: ScanConfig, offset_mm: float) -> np.ndarray:
    """For each source, a detector index at the fixed lateral offset.

    Edge sources fall back to the mirrored direction, so every pair has
    the same separation (the conventional adjacent-pair CW-DOT layout).
    """
    pos = scan.detectors
    out = np.empty(scan.n_sources, dtype=np.int64)
    for s in range(scan.n_sources):
        for cand in (pos[s] + [offset_mm, 0], pos[s] - [offset_mm, 0],
                     pos[s] + [0, offset_mm], pos[s] - [0, offset_mm]):
            hit = np.where(np.all(np.isclose(pos, cand, atol=1e-9), axis=1))[0]
            if len(hit):
                out[s] = hit[0]
                break
        else:
            raise ConfigError(
                f"no detector at {offset_mm} mm offset from source {s}; "
                "the DOT baseline needs the offset to be a multiple of the scan pitch")
    return out


def build_conditioning_operators(medium, scan, grid, settings, aperture, cases,
                                 dot_offset_mm: float = 4.0):
    """The three comparison Jacobians from one MC run.

    Each case uses its conventional measurement design over the same scan
    points: ctofdot takes time-binned collocated pairs; tofdot time-binned
    pairs of arbitrary (deranged) separation; dot is the traditional CW
    baseline, adjacent pairs at a fixed offset with time bins summed.
    """
    from .forward_ops import collapse_time
    n = scan.n_sources
    perm = _derangement(n, settings.seed + 101)
    adj = _offset_neighbors(scan, dot_offset_mm)
    subsets = np.column_stack([np.arange(n), perm, adj])
    J = mc_transport.estimate_jacobian_mc(medium, scan, grid, settings,
                                          detector_aperture=aperture,
                                          detector_subsets=subsets)
    n_bins = scan.time_axis.n_bins
    mat = J.matrix.reshape(n, 3, n_bins, -1)
    ops = {}
    if "ctofdot" in cases:
        rows = MeasurementIndex.pairs(np.arange(n), np.arange(n), n, n, n_bins)
        ops["ctofdot"] = DenseOperator(mat[:, 0].reshape(n * n_bins, -1), rows, grid)
    if "tofdot" in cases:
        rows = MeasurementIndex.pairs(np.arange(n), perm, n, n, n_bins)
        ops["tofdot"] = DenseOperator(mat[:, 1].reshape(n * n_bins, -1), rows, grid)
    if "dot" in cases:
        rows = MeasurementIndex.pairs(np.arange(n), adj, n, n, n_bins)
        adj_td = DenseOperator(mat[:, 2].reshape(n * n_bins, -1), rows, grid)
        ops["dot"] = collapse_time(adj_td)
    return ops


def cmd_benchmark(args) -> int:
    sweep = [int(s) for s in args.sizes.split(",")]
    methods = {}
    medium = SlabMedium(OpticalProperties(mu_s=9.0, n=1.4), thickness=6.5)
    params = analytic_model.DiffusionParams.from_medium(medium)
    n_bins = args.bins
    axis = TimeAxis(n_bins, 100.0)

    def conv_factory(side):
        pitch = 32.0 / side
        grid = VoxelGrid.centered((side, side, 1), (pitch, pitch, 1.0), z0=5.0)
        stack = analytic_model.psf_analytic([5.5], axis, params, medium,
                                            kernel_radius=min(side - 1, 8), pitch=pitch)
        op = ConvOperator(stack, grid)
        return op, np.zeros(op.meas_shape) + 1.0

    def dense_factory_tof(side):
        pitch = 32.0 / max(side * side - 1, 1)
        scan = ScanConfig.confocal_grid(side, side, 32.0 / side, axis)
        vside = args.voxels
        grid = VoxelGrid.centered((vside, vside, 1), (32.0 / vside, 32.0 / vside, 1.0), z0=5.0)
        op = analytic_model.jacobian_td(scan, grid, axis, params, medium)
        return op, np.zeros(op.meas_shape) + 1.0

    def dense_factory_cw(side):
        scan = ScanConfig.confocal_grid(side, side, 32.0 / side, axis)
        vside = args.voxels
        grid = VoxelGrid.centered((vside, vside, 1), (32.0 / vside, 32.0 / vside, 1.0), z0=5.0)
        op = analytic_model.jacobian_cw(scan, grid, params, medium)
        return op, np.zeros(op.meas_shape) + 1.0

    chosen = args.methods.split(",")
    if "ctof_dot_conv" in chosen:
        methods["ctof_dot_conv"] = conv_factory
    if "tof_dot" in chosen:
        methods["tof_dot"] = dense_factory_tof
    if "dot" in chosen:
        methods["dot"] = dense_factory_cw
    rows = analysis.runtime_benchmark(methods, sweep, sweep_name=args.sweep,
                                      solve_iters=args.iters, threads=args.threads or 1)
    analysis.write_benchmark_csv(rows, args.out)
    for row in rows:
        print(f"{row['method']:14s} {row['param']:12s} {row['value']:13s} "
              f"{row['wall_ms']:10.2f} ms")
    return EXIT_OK


def cmd_multiplex_study(args) -> int:
    cfg = load_config(args.config)
    medium = build_medium(cfg)
    grid = build_grid(cfg)
    axis = build_time_axis(cfg)
    acq = cfg.get("acquisition", {})
    k = cfg["kernel"]
    params = analytic_model.DiffusionParams.from_medium(
        medium, matched_boundary=not cfg.get("mc", {}).get("fresnel", True))
    stack = analytic_model.psf_analytic(k["depths"], axis, params, medium,
                                        k["radius"], k.get("pitch", grid.pitch[0]),
                                        k.get("voxel_depth"))
    truth = build_phantom(cfg, grid)
    n_src = grid.dims[0] * grid.dims[1]
    S = build_multiplex(args.scheme, n_src)
    solver = build_solver(cfg, stack)
    study = analysis.MultiplexStudyConfig(
        grid=grid, kernels=stack, truth=truth, S=S, solver=solver,
        source_rate=acq.get("source_rate", 1e5),
        max_count_rate=acq.get("max_count_rate", 5e6),
        dark_count_rate=acq.get("dark_count_rate", 200.0))
    times = [float(t) for t in args.integration_times.split(",")]
    rows = analysis.multiplex_psnr_study(study, times, n_seeds=args.seeds)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["integration_time_ms",
                                                "psnr_sequential",
                                                "psnr_multiplexed", "n_seeds"])
        writer.writeheader()
        writer.writerows(rows)
    out_dir = Path(args.out).parent
    res = analysis.multiplex_psnr_run(study, times[0], seed=0)
    write_pgm(out_dir / "recon_sequential.pgm", res["recon_sequential"].values[:, :, 0].T)
    write_pgm(out_dir / "recon_multiplexed.pgm", res["recon_multiplexed"].values[:, :, 0].T)
    for row in rows:
        print(f"T={row['integration_time_ms']:g} ms: sequential "
              f"{row['psnr_sequential']:.2f} dB, multiplexed "
              f"{row['psnr_multiplexed']:.2f} dB")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctofdot", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None,
                   help="numba worker threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate transients for a scene")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", choices=["mc", "analytic"], default="mc")
    s.add_argument("--photons", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("kernel", help="estimate a confocal kernel stack")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--backend", choices=["mc", "analytic"], default="mc")
    s.add_argument("--depths", default=None, help="comma-separated depths (mm)")
    s.add_argument("--photons", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_kernel)

    s = sub.add_parser("reconstruct", help="FISTA reconstruction")
    s.add_argument("--measurements", required=True)
    s.add_argument("--operator", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--lambda-rel", type=float, default=None,
                   help="lambda as a fraction of max|A^T m| (scale-free)")
    s.add_argument("--lambda-per-depth", default=None)
    s.add_argument("--lambda-depth-weighted", action="store_true")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--tolerance", type=float, default=1e-6)
    s.add_argument("--nonneg", action="store_true")
    s.add_argument("--multiplex", default=None, help="pattern matrix DOTT file")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("conditioning", help="singular-value comparison of operator designs")
    s.add_argument("config")
    s.add_argument("--cases", default="dot,tofdot,ctofdot")
    s.add_argument("--out", required=True)
    s.add_argument("--floor", type=float, default=1e-2)
    s.add_argument("--photons", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_conditioning)

    s = sub.add_parser("benchmark", help="forward/solve runtime table")
    s.add_argument("--sweep", choices=["sources", "voxels"], default="sources")
    s.add_argument("--sizes", default="8,16,32")
    s.add_argument("--methods", default="dot,tof_dot,ctof_dot_conv")
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--voxels", type=int, default=32)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("multiplex-study", help="PSNR vs integration time, both arms")
    s.add_argument("config")
    s.add_argument("--scheme", default="hadamard01",
                   choices=["identity", "hadamard01", "hadamard_pm"])
    s.add_argument("--integration-times", default="1,10,100")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_multiplex_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba
        numba.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepSizeError, OperatorError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TensorIoError, OSError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
