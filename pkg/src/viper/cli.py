"""Command line scenario runner: ``viper run``, ``viper bench`` and ``viper comb``.

Exit codes: 0 success, 1 input/output failure, 2 invalid scene, 3 the
simulation produced non-finite values.
"""

import argparse
import csv
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from viper import metrics, scenarios, scenefile
from viper.bundling import comb, read_slices
from viper.meshio import pills_obj, write_obj
from viper.rod import InvalidInput
from viper.solver import SimulationError, step

THREADS_ENV = "VIPER_THREADS"
BUILTIN_PREFIX = "builtin:"

EXIT_OK, EXIT_IO, EXIT_SCENE, EXIT_SIM = 0, 1, 2, 3


def _threads(deterministic):
    if deterministic:
        return 1
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise scenefile.SceneError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise scenefile.SceneError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return n


def _limits(n):
    return threadpool_limits(limits=n) if n else nullcontext()


def load_documents(source):
    """{label: (doc, base_dir)} for a scene path or ``builtin:NAME``.

    Paired builtins give one entry per run; single scenes use the label ``""``.
    """
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX):]
        try:
            doc = scenarios.builtin(name)
        except KeyError as exc:
            raise scenefile.SceneError(exc.args[0]) from None
        if scenarios.is_paired(doc):
            return {label: (d, Path(".")) for label, d in doc.items()}
        return {"": (doc, Path("."))}
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise scenefile.SceneError(f"cannot read {path}: {exc.strerror}") from None
    return {"": (scenefile.parse(text, str(path)), path.parent)}


def run_scene(sf, steps, out, deterministic=False, frames=False, log=None):
    """Step ``sf`` and write its outputs into ``out``; returns the metrics rows."""
    out.mkdir(parents=True, exist_ok=True)
    scene = sf.scene
    outputs = sf.outputs
    every = max(1, int(outputs.get("every", 1)))
    want_frames = frames or outputs.get("frames", False)
    want_skin = sf.skin is not None and (frames or outputs.get("skin_frames", False))
    (out / "scene.json").write_text(scenefile.dumps(sf.doc), encoding="utf-8")

    rows = [metrics.initial_row(scene)]
    iteration_rows = []
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as stream:
        writer = metrics.MetricsWriter(stream)
        writer.write(rows[0])
        _write_frames(sf, out, 0, want_frames, want_skin)
        for _ in range(steps):
            try:
                report = step(scene)
            except SimulationError as exc:
                stream.flush()
                raise SimulationError(f"{exc}; last written step {rows[-1].step}, time {rows[-1].time:.6g}") from None
            row = metrics.collect(scene, report, deterministic)
            rows.append(row)
            writer.write(row)
            for i, sweep in enumerate(report.iterations):
                iteration_rows.append((report.step, i + 1, sweep.residual))
            if report.step % every == 0:
                _write_frames(sf, out, report.step, want_frames, want_skin)
            if log is not None and report.step % 100 == 0:
                log(f"step {report.step}: volume error {row.volume_rel_error:.3e}")
    if iteration_rows:
        _write_iterations(out / "iterations.csv", iteration_rows)
    return rows


def _write_frames(sf, out, index, frames, skin):
    if frames:
        pills, _ = sf.scene.pill_set()
        (out / f"frame_{index:05d}.obj").write_text(pills_obj(pills), encoding="utf-8")
    if skin:
        verts = sf.skin.update(sf.scene.state)
        (out / f"skin_{index:05d}.obj").write_text(write_obj(verts, sf.skin.mesh.faces), encoding="utf-8")


def _write_iterations(path, rows):
    kinds = sorted({k for _, _, res in rows for k in res})
    with open(path, "w", encoding="utf-8", newline="") as stream:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["step", "iteration"] + [f"residual_{k}" for k in kinds])
        for s, i, res in rows:
            w.writerow([s, i] + [repr(float(res.get(k, 0.0))) for k in kinds])


def cmd_run(args):
    docs = load_documents(args.scene)
    out = Path(args.out)
    with _limits(_threads(args.deterministic)):
        for label, (doc, base) in docs.items():
            sf = scenefile.build(doc, base)
            target = out / label if label else out
            rows = run_scene(sf, args.steps, target, args.deterministic, args.frames)
            worst = max(r.volume_rel_error for r in rows)
            print(f"{sf.name}: {args.steps} steps -> {target} (max volume error {worst:.3e})")
    return EXIT_OK


def bench_scene(scene, steps):
    """(steps per second, mean per-phase milliseconds) after one warm-up step."""
    phases = {"predict": 0.0, "broad": 0.0, "narrow": 0.0, "solve": 0.0, "finalize": 0.0}
    step(scene)
    start = time.perf_counter()
    for _ in range(steps):
        report = step(scene)
        for k, v in report.phases.items():
            phases[k] += v
    elapsed = time.perf_counter() - start
    rate = steps / elapsed if elapsed > 0 else float("inf")
    return rate, {k: 1e3 * v / max(steps, 1) for k, v in phases.items()}


def cmd_bench(args):
    docs = load_documents(args.scene)
    with _limits(_threads(False)):
        for label, (doc, base) in docs.items():
            sf = scenefile.build(doc, base)
            rate, phases = bench_scene(sf.scene, args.steps)
            name = f"{sf.name} [{label}]" if label else sf.name
            print(f"scene: {name}")
            print(f"dofs: {sf.scene.dof_count()}")
            print(f"steps: {args.steps}")
            print(f"steps_per_second: {rate:.3f}")
            print(f"ms_per_step: {1e3 / rate if rate else 0.0:.3f}")
            for k, v in phases.items():
                print(f"phase_ms.{k}: {v:.3f}")
    return EXIT_OK


def comb_document(slices, radius, name="combed"):
    result = comb(slices)
    rods = [{"name": f"rod{k}", "centers": poly.tolist(), "radii": radius} for k, poly in enumerate(result.rods)]
    return {"schema": scenefile.SCHEMA_VERSION, "name": name, "rods": rods}, result


def cmd_comb(args):
    if not args.radius > 0.0:
        raise scenefile.SceneError("--radius must be positive")
    try:
        text = Path(args.slices).read_text(encoding="utf-8")
    except OSError as exc:
        raise scenefile.SceneError(f"cannot read {args.slices}: {exc.strerror}") from None
    slices = read_slices(text)
    if len(slices) < 2:
        raise scenefile.SceneError(f"{args.slices}: need at least two slices, got {len(slices)}")
    doc, result = comb_document(slices, args.radius, Path(args.slices).stem)
    Path(args.out).write_text(scenefile.dumps(doc), encoding="utf-8")
    print(f"{len(result.rods)} rods of {len(slices)} vertices, total length {result.total_length:.6g} -> {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="viper", description="Volume-preserving elastic rod simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scene and write metrics and frames")
    run.add_argument("scene", help="scene JSON path or builtin:NAME")
    run.add_argument("--steps", type=int, required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--deterministic", action="store_true", help="single thread, zero wall-clock column")
    run.add_argument("--frames", action="store_true", help="write pill (and skin) OBJ frames")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="measure stepping throughput")
    bench.add_argument("scene", help="scene JSON path or builtin:NAME")
    bench.add_argument("--steps", type=int, default=100)
    bench.set_defaults(func=cmd_bench)

    cb = sub.add_parser("comb", help="chain per-slice points into rods")
    cb.add_argument("slices", help="text file of blank-line separated 'x y z' blocks")
    cb.add_argument("--radius", type=float, required=True)
    cb.add_argument("--out", required=True, help="scene JSON to write")
    cb.set_defaults(func=cmd_comb)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "steps", 0) is not None and getattr(args, "steps", 0) < 0:
        print("error: --steps must be non-negative", file=sys.stderr)
        return EXIT_SCENE
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENE
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
