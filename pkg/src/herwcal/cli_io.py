"""Pose files, calibration reports and the ``herwcal`` command line.

Pose file format (text, one record per line)::

    #herwcal-poses v1
    # kind,step,target,sensor,tx,ty,tz,qw,qx,qy,qz[,timestamp]
    A,0,0,,0.1,0.2,0.0,1,0,0,0
    B,0,0,0,1.5,-0.2,3.1,0.7071067811865476,0,0.7071067811865476,0

The first non-blank line must be the version header; other ``#`` lines are
comments. ``A`` records carry the carrier pose of a target at a step and
leave the sensor empty; ``B`` records carry the target pose seen by a
sensor. Translations are in meters, quaternions ordered ``(w, x, y, z)``.
Every ``B`` needs the ``A`` of the same step and target.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from herwcal import __version__, herw, metrics, planar, synth
from herwcal.dq import Pose
from herwcal.errors import (
    ConsistencyError,
    DegeneracyError,
    HERWError,
    InvalidInputError,
    ParseError,
    SolverError,
)

POSE_HEADER = "#herwcal-poses v1"
REPORT_FORMAT = "herwcal-report"
REPORT_VERSION = 1
TRUTH_FORMAT = "herwcal-truth"
RENORM_TOL = 1e-6
RENORM_WARN = 1e-3

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DEGENERATE = 3
EXIT_SOLVER = 4
EXIT_UNCERTIFIED = 5


class PoseFileWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PoseRecord:
    kind: str  # "A" or "B"
    step: int
    target: int
    sensor: int | None
    translation: tuple
    rotation: tuple  # (w, x, y, z)
    timestamp: float | None = None


# -- pose files ---------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _parse_record(row, line):
    if len(row) not in (11, 12):
        raise ParseError(f"expected 11 or 12 fields, got {len(row)}", line)
    kind = row[0].strip()
    if kind not in ("A", "B"):
        raise ParseError(f"record kind must be A or B, got {kind!r}", line)
    try:
        step, target = int(row[1]), int(row[2])
        sensor = int(row[3]) if row[3].strip() else None
        nums = [float(v) for v in row[4:11]]
        stamp = float(row[11]) if len(row) == 12 and row[11].strip() else None
    except ValueError as exc:
        raise ParseError(f"bad number ({exc})", line) from None
    if step < 0 or target < 0 or (sensor is not None and sensor < 0):
        raise ParseError("indices must be non-negative", line)
    if kind == "A" and sensor is not None:
        raise ParseError("A records take no sensor id", line)
    if kind == "B" and sensor is None:
        raise ParseError("B records need a sensor id", line)
    if not np.all(np.isfinite(nums)):
        raise ParseError("non-finite pose value", line)
    q = np.array(nums[3:])
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ParseError("zero quaternion", line)
    if abs(nq - 1.0) > RENORM_WARN:
        warnings.warn(f"line {line}: quaternion norm {nq:.6g} renormalized", PoseFileWarning, stacklevel=3)
    if abs(nq - 1.0) > RENORM_TOL:
        q = q / nq
    return PoseRecord(kind, step, target, sensor, tuple(nums[:3]), tuple(q), stamp)


def read_records(stream):
    """Parse a pose file into ``PoseRecord``s; raises ``ParseError`` with line numbers."""
    text = stream.read() if hasattr(stream, "read") else str(stream)
    records, header_seen = [], False
    for line, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s:
            continue
        if not header_seen:
            if s != POSE_HEADER:
                raise ParseError(f"missing version header {POSE_HEADER!r}", line)
            header_seen = True
            continue
        if s.startswith("#"):
            continue
        row = next(csv.reader([s]))
        records.append((line, _parse_record(row, line)))
    if not records:
        raise ParseError("no pose records (empty problem)")
    return records


def parse_poses(stream) -> herw.HERWProblem:
    """Read a pose file into a problem without priors."""
    A, B = {}, {}
    for line, rec in read_records(stream):
        pose = Pose(np.array(rec.rotation), np.array(rec.translation))
        if rec.kind == "A":
            key = (rec.step, rec.target)
            if key in A:
                raise ParseError(f"duplicate A record for step {rec.step}, target {rec.target}", line)
            A[key] = (line, pose)
        else:
            key = (rec.step, rec.target, rec.sensor)
            if key in B:
                raise ParseError(f"duplicate B record for step {rec.step}, target {rec.target}, sensor {rec.sensor}", line)
            B[key] = (line, pose)
    if not B:
        raise ParseError("no B records (empty problem)")
    ms = []
    for (k, t, s), (line, pose) in sorted(B.items()):
        if (k, t) not in A:
            raise ConsistencyError(f"B record has no A record for step {k}, target {t}", line)
        ms.append(herw.Measurement(k, t, s, A[k, t][1], pose))
    m_X = 1 + max(m.target for m in ms)
    m_Y = 1 + max(m.sensor for m in ms)
    return herw.HERWProblem(m_X, m_Y, ms)


def _pose_fields(P: Pose):
    return [_fmt(v) for v in P.translation] + [_fmt(v) for v in P.rotation]


def write_poses(problem_or_scenario, stream):
    """Write a problem (or a scenario's noisy measurements) in pose-file format."""
    if isinstance(problem_or_scenario, synth.Scenario):
        sc = problem_or_scenario
        a_items = sorted(sc.A.items())
        b_items = [((k, t, s), sc.B[k, t, s]) for k, t, s in sc.schedule]
    else:
        ms = problem_or_scenario.measurements
        a_items = sorted({(m.step, m.target): m.A for m in ms}.items())
        b_items = [(m.key, m.B) for m in sorted(ms, key=lambda m: m.key)]
    used = {(k, t) for (k, t, _), _ in b_items}
    w = csv.writer(stream, lineterminator="\n")
    stream.write(POSE_HEADER + "\n")
    stream.write("# kind,step,target,sensor,tx,ty,tz,qw,qx,qy,qz\n")
    for (k, t), P in a_items:
        if (k, t) in used:
            w.writerow(["A", k, t, ""] + _pose_fields(P))
    for (k, t, s), P in b_items:
        w.writerow(["B", k, t, s] + _pose_fields(P))


# -- reports -----------------------------------------------------------------------

def _pose_dict(P: Pose):
    return {"translation": [float(v) for v in P.translation], "rotation": [float(v) for v in P.rotation]}


def _pose_from(d):
    return Pose(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


@dataclass
class CalibReport:
    X: list
    Y: list
    residual_cost: float
    duality_gap: float
    certified: bool
    certificate: dict
    corrections: list
    planar_corrected: bool
    signs: dict  # "t,s" -> signs in step order
    metrics: dict
    config: dict
    input_digest: str
    tool_version: str = __version__
    format: str = REPORT_FORMAT
    version: int = REPORT_VERSION
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["X"] = [_pose_dict(P) for P in self.X]
        d["Y"] = [_pose_dict(P) for P in self.Y]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != REPORT_FORMAT:
            raise ParseError("not a calibration report")
        if d.get("version") != REPORT_VERSION:
            raise ParseError(f"unsupported report version {d.get('version')}")
        d = dict(d)
        d["X"] = [_pose_from(p) for p in d["X"]]
        d["Y"] = [_pose_from(p) for p in d["Y"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed report: {exc}") from None


def build_report(problem, result, *, config, digest) -> CalibReport:
    signed = problem.with_signs(result.signs)
    pair_metrics, pair_signs = {}, {}
    for (t, s), ms in signed.pairs().items():
        err = metrics.cycle_error([m.A for m in ms], result.X[t], [m.B for m in ms], result.Y[s])
        pair_metrics[f"{t},{s}"] = {"n": len(ms), "cycle_rms_t_m": err.t, "cycle_rms_r_deg": err.r}
        pair_signs[f"{t},{s}"] = [int(result.signs.get(m.key, 1)) for m in ms]
    obs = result.observability.as_dict() if result.observability is not None else {}
    return CalibReport(
        X=list(result.X),
        Y=list(result.Y),
        residual_cost=float(result.residual_cost),
        duality_gap=float(result.certificate.gap),
        certified=bool(result.certified_global),
        certificate=result.certificate.as_dict(),
        corrections=[c.as_dict() for c in result.corrections],
        planar_corrected=bool(result.planar_corrected),
        signs=pair_signs,
        metrics={"pairs": pair_metrics, "observability": obs, "recovery_mode": result.recovery_mode},
        config=config,
        input_digest=digest,
    )


def write_truth(scenario, stream):
    d = {
        "format": TRUTH_FORMAT,
        "version": 1,
        "kind": scenario.kind,
        "seed": scenario.seed,
        "sigma_t_m": scenario.sigma_t,
        "sigma_r_deg": scenario.sigma_r,
        "X": [_pose_dict(P) for P in scenario.X],
        "Y": [_pose_dict(P) for P in scenario.Y],
        "target_norms_m": scenario.target_norms(),
    }
    stream.write(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_truth(text):
    try:
        d = json.loads(text)
        if d.get("format") != TRUTH_FORMAT:
            raise ParseError("not a ground-truth file")
        return [_pose_from(p) for p in d["X"]], [_pose_from(p) for p in d["Y"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed truth file: {exc}") from None


# -- commands ------------------------------------------------------------------------

def _parse_norm(text):
    key, sep, val = text.partition("=")
    if not sep:
        raise InvalidInputError(f"--norm expects <target>=<meters>, got {text!r}")
    key = key.strip()
    idx = key[len("target"):] if key.startswith("target") else key
    try:
        return int(idx), float(val)
    except ValueError:
        raise InvalidInputError(f"--norm expects <target>=<meters>, got {text!r}") from None


def cmd_simulate(args, out=None):
    out = out or sys.stdout
    if args.kind == "general":
        sc = synth.generate_general(args.n, m_X=args.targets, m_Y=args.sensors, seed=args.seed)
    else:
        n_per = tuple(args.n_per_sensor) if args.n_per_sensor else (args.n,) * args.sensors
        mounts = [(0.6, 0.0, 1.78), (-0.5, 0.4, 1.5), (0.0, -0.6, 1.2), (1.0, 0.5, 1.6)]
        sc = synth.generate_planar(n_per, targets=mounts[:args.targets], seed=args.seed, slope_deg=args.slope)
    sc = synth.add_noise(sc, args.sigma_t, args.sigma_r, seed=args.seed + 1)
    with open(args.poses, "w", newline="") as fh:
        write_poses(sc, fh)
    with open(args.truth, "w") as fh:
        write_truth(sc, fh)
    norms = ",".join(f"target{t}={a:.6f}" for t, a in enumerate(sc.target_norms()))
    print(f"wrote {len(sc.schedule)} detections to {args.poses}; truth in {args.truth}; norms {norms}", file=out)
    return EXIT_OK


def cmd_calibrate(args, out=None):
    out = out or sys.stdout
    raw = Path(args.poses).read_bytes()
    problem = parse_poses(io.StringIO(raw.decode("utf-8")))
    norms = dict(_parse_norm(s) for s in args.norm)
    opts = {"ransac_iterations": args.ransac_iters, "seed": args.seed, "gap_tol": args.gap_tol}
    try:
        if norms or args.planar_auto:
            result = planar.calibrate_infrastructure(problem, norms, **opts)
        else:
            result = herw.calibrate(problem, **opts)
    except DegeneracyError as exc:
        msg = str(exc).rstrip(".")
        raise DegeneracyError(f"{msg}. On the command line, give --norm target<i>=<meters> for every target.") from None
    config = {
        "norms": {str(t): a for t, a in sorted(norms.items())},
        "seed": args.seed,
        "ransac_iterations": args.ransac_iters,
        "planar_auto": bool(args.planar_auto),
        "gap_tol": args.gap_tol,
    }
    report = build_report(problem, result, config=config, digest=hashlib.sha256(raw).hexdigest())
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text)
    else:
        out.write(text)
    status = "certified" if report.certified else "NOT certified"
    print(f"calibration {status}: cost {report.residual_cost:.6g}, gap {report.duality_gap:.3g}", file=sys.stderr)
    return EXIT_OK if report.certified else EXIT_UNCERTIFIED


def evaluation_rows(report: CalibReport, X_true, Y_true):
    if len(X_true) != len(report.X) or len(Y_true) != len(report.Y):
        raise InvalidInputError("report and truth disagree on the number of unknowns")
    rows = []
    for name, truth, est in [(f"X{t}", a, b) for t, (a, b) in enumerate(zip(X_true, report.X))] + \
                            [(f"Y{s}", a, b) for s, (a, b) in enumerate(zip(Y_true, report.Y))]:
        e = metrics.calib_error(truth, est)
        rows.append({"unknown": name, "eps_t_m": e.t, "eps_r_deg": e.r})
    return rows


def render_figures(rows, report: CalibReport, fig_dir):
    """Bar charts of per-unknown errors and per-pair cycle residuals; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    names = [r["unknown"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.bar(names, [1e3 * r["eps_t_m"] for r in rows], color="tab:blue")
    ax1.set_ylabel("translation error [mm]")
    ax2.bar(names, [r["eps_r_deg"] for r in rows], color="tab:orange")
    ax2.set_ylabel("rotation error [deg]")
    fig.tight_layout()
    p1 = fig_dir / "calibration_errors.png"
    fig.savefig(p1, dpi=100, metadata={"Software": None})
    plt.close(fig)

    pairs = report.metrics.get("pairs", {})
    fig, ax = plt.subplots(figsize=(5, 3.2))
    keys = sorted(pairs)
    ax.bar([f"({k})" for k in keys], [1e3 * pairs[k]["cycle_rms_t_m"] for k in keys], color="tab:green")
    ax.set_xlabel("(target, sensor)")
    ax.set_ylabel("cycle RMS [mm]")
    fig.tight_layout()
    p2 = fig_dir / "cycle_residuals.png"
    fig.savefig(p2, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [p1, p2]


def cmd_evaluate(args, out=None):
    out = out or sys.stdout
    report = CalibReport.from_json(Path(args.report).read_text())
    X_true, Y_true = read_truth(Path(args.truth).read_text())
    rows = evaluation_rows(report, X_true, Y_true)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["unknown", "eps_t_m", "eps_r_deg"], delimiter=args.delimiter,
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"unknown": r["unknown"], "eps_t_m": f"{r['eps_t_m']:.6e}", "eps_r_deg": f"{r['eps_r_deg']:.6e}"})
    out.write(buf.getvalue())
    if args.table:
        Path(args.table).write_text(buf.getvalue())
    if args.fig_dir:
        for p in render_figures(rows, report, args.fig_dir):
            print(f"figure: {p}", file=sys.stderr)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="herwcal", description="Multi-sensor hand-eye robot-world calibration.")
    ap.add_argument("--version", action="version", version=f"herwcal {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic pose file and its ground truth")
    sp.add_argument("--kind", choices=["general", "planar"], default="general")
    sp.add_argument("--n", type=int, default=15, help="steps (per sensor for planar)")
    sp.add_argument("--n-per-sensor", type=int, nargs="+", help="planar: steps per sensor")
    sp.add_argument("--targets", type=int, default=1)
    sp.add_argument("--sensors", type=int, default=1)
    sp.add_argument("--sigma-t", type=float, default=0.0, help="translation noise [m]")
    sp.add_argument("--sigma-r", type=float, default=0.0, help="rotation noise [deg]")
    sp.add_argument("--slope", type=float, default=0.0, help="planar: road slope [deg]")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--poses", required=True, help="output pose file")
    sp.add_argument("--truth", required=True, help="output ground-truth JSON")
    sp.set_defaults(func=cmd_simulate)

    cp = sub.add_parser("calibrate", help="calibrate from a pose file")
    cp.add_argument("poses")
    cp.add_argument("-o", "--output", help="report path (default: stdout)")
    cp.add_argument("--norm", action="append", default=[], metavar="TARGET=METERS",
                    help="translation-norm prior, e.g. target0=1.88 (repeatable)")
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--ransac-iters", type=int, default=herw.RANSAC_ITERATIONS)
    cp.add_argument("--planar-auto", action="store_true", help="detect planar motion and disambiguate")
    cp.add_argument("--gap-tol", type=float, default=herw.qcqp.GAP_REL_TOL)
    cp.set_defaults(func=cmd_calibrate)

    ep = sub.add_parser("evaluate", help="compare a report with ground truth")
    ep.add_argument("report")
    ep.add_argument("truth")
    ep.add_argument("--delimiter", default=",")
    ep.add_argument("--table", help="also write the delimited table here")
    ep.add_argument("--fig-dir", help="render matplotlib figures into this directory")
    ep.set_defaults(func=cmd_evaluate)
    return ap


def exit_code_for(exc):
    if isinstance(exc, (ParseError, InvalidInputError)):
        return EXIT_PARSE
    if isinstance(exc, DegeneracyError):
        return EXIT_DEGENERATE
    if isinstance(exc, SolverError):
        return EXIT_SOLVER
    return EXIT_SOLVER


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HERWError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
