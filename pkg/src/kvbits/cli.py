"""``kvbits`` command line: calibrate, fit, allocate, predict-gain, simulate, validate.

Every command is deterministic given its flags.  Output files carry a
``config_echo`` record of the flags that produced them (the MSE CSV has a
fixed header, so its record goes to ``<out>.config.json``).  Errors are
printed to stderr prefixed with ``error:`` and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from kvbits import allocator, distortion, evaluator, quantizers, sensitivity

DEFAULT_SEED = 42
DEFAULT_BITS = "2,3,4,5,6"

# reference Lloyd-Max MSE for N(0, 1), by bit-width
EXPECTED_LLOYD_MAX = {
    1: 3.634e-01,
    2: 1.175e-01,
    3: 3.455e-02,
    4: 9.501e-03,
    5: 2.512e-03,
    6: 7.647e-04,
}


class CommandError(Exception):
    pass


def _num(x) -> str:
    return f"{x:.8g}"


def _bits_list(text: str) -> list:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CommandError(f"--bits must be comma-separated integers, got {text!r}") from None
    if not values:
        raise CommandError("--bits is empty")
    return values


def _echo(args) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        if isinstance(value, Path):
            value = str(value.resolve())
        out[key] = value
    return out


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    spec = quantizers.QuantizerSpec(args.quantizer, seed=args.seed)
    bits = _bits_list(args.bits)
    points = quantizers.measure_mse(spec, bits, dist=args.dist, rows=args.rows, cols=args.cols, seed=args.seed)
    try:
        distortion.write_mse_csv(args.out, spec.scheme, args.component, points)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    _write_json(Path(str(args.out) + ".config.json"), {"config_echo": _echo(args)})
    print(f"quantizer={spec.scheme} component={args.component} rows={args.rows} cols={args.cols} seed={args.seed}")
    for p in points:
        print(f"bits={p.bits:g} mse={_num(p.mse)}")
    return 0


def _select(groups: dict, quantizer, component, path):
    keys = list(groups)
    if quantizer is not None:
        names = {quantizer}
        try:
            names.add(quantizers.resolve_scheme(quantizer))
        except quantizers.QuantizerError:
            pass  # free-form label, match literally
        keys = [k for k in keys if k[0] in names]
    if component is not None:
        keys = [k for k in keys if k[1] == component]
    if not keys:
        raise CommandError(f"{path}: no rows for quantizer={quantizer} component={component}")
    if len(keys) > 1:
        names = ", ".join(f"{q}/{c}" for q, c in keys)
        raise CommandError(f"{path}: several series ({names}); pick one with --quantizer/--component")
    return keys[0], groups[keys[0]]


def cmd_fit(args) -> int:
    groups = distortion.read_mse_csv(args.csv)
    (quantizer, component), points = _select(groups, args.quantizer, args.component, args.csv)
    model = distortion.fit_exponential(points, quantizer=quantizer, component=component)
    report = distortion.fit_quality_report(points, model)
    payload = model.to_dict()
    payload["config_echo"] = _echo(args)
    _write_json(args.out, payload)
    print(f"quantizer={quantizer} component={component}")
    print(f"alpha={_num(model.alpha)} beta={_num(model.beta)} r2={model.r_squared:.6f}")
    print(f"max_relative_error={_num(report.max_relative_error)} at bits={report.worst_bits:g}")
    return 0


def cmd_allocate(args) -> int:
    sens = sensitivity.load_sensitivity(args.sensitivity)
    if args.mode == "separate":
        path_k = args.model_k or args.model
        path_v = args.model_v or args.model
        if path_k is None or path_v is None:
            raise CommandError("separate mode needs --model-k and --model-v (or --model for both)")
        refs = [str(Path(path_k).resolve()), str(Path(path_v).resolve())]
        model_k, model_v = distortion.load_model(path_k), distortion.load_model(path_v)
        result = allocator.allocate_kv_separate(
            sens, model_k, model_v, args.avg_bits, args.b_min, args.b_max, method=args.method
        )
    else:
        if args.model is None:
            raise CommandError("joint mode needs --model")
        refs = [str(Path(args.model).resolve())]
        result = allocator.allocate_kv_joint(
            sens, distortion.load_model(args.model), args.avg_bits, args.b_min, args.b_max, method=args.method
        )

    def grid(g):
        if args.method == "greedy":
            return [[int(b) for b in row] for row in np.asarray(g)]
        return np.asarray(g, dtype=float).tolist()

    gain = allocator.predict_gain(sens.all_weights())
    payload = {
        "avg_bits": args.avg_bits,
        "budget": result.problem.budget,
        "b_min": args.b_min,
        "b_max": args.b_max,
        "mode": args.mode,
        "method": args.method,
        "bits_k": grid(result.bits_k),
        "bits_v": grid(result.bits_v),
        "mean_bits_k": result.mean_bits_k,
        "mean_bits_v": result.mean_bits_v,
        "objective": result.allocation.objective,
        "predicted_gain_ratio": gain,
        "model_refs": refs,
        "config_echo": _echo(args),
    }
    _write_json(args.out, payload)
    print(f"mode={args.mode} method={args.method} budget={result.problem.budget} components={result.problem.n}")
    print(f"mean_bits_k={_num(result.mean_bits_k)} mean_bits_v={_num(result.mean_bits_v)}")
    print(f"objective={_num(result.allocation.objective)} predicted_gain_ratio={_num(gain)}")
    return 0


def cmd_predict_gain(args) -> int:
    sens = sensitivity.load_sensitivity(args.sensitivity)
    groups = (("all", sens.all_weights()), ("key", sens.weights_k), ("value", sens.weights_v))
    print("group  n  am  gm  am_gm  log_std  exp_half_var")
    for name, w in groups:
        st = sensitivity.stats(w)
        print(
            f"{name} {st.count} {_num(st.arithmetic_mean)} {_num(st.geometric_mean)} "
            f"{_num(st.am_gm_ratio)} {_num(st.log_std)} {_num(st.lognormal_gain)}"
        )
    return 0


def _load_allocation(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read allocation {path}: {exc}") from None
    for key in ("bits_k", "bits_v"):
        if key not in data:
            raise CommandError(f"{path}: missing {key}")
    return data


def cmd_simulate(args) -> int:
    sens = sensitivity.load_sensitivity(args.sensitivity)
    alloc = _load_allocation(args.allocation)
    rot_seed = args.seed if args.rotation_seed is None else args.rotation_seed
    spec_k = quantizers.QuantizerSpec(args.quantizer_k or args.quantizer, seed=rot_seed)
    spec_v = quantizers.QuantizerSpec(args.quantizer_v or args.quantizer, seed=rot_seed)
    report = evaluator.simulate(
        sens, spec_k, spec_v, alloc["bits_k"], alloc["bits_v"],
        rows=args.rows, cols=args.cols, seed=args.seed, config_echo={"command": _echo(args)},
    )
    try:
        evaluator.save_report(report, args.out)
        if args.csv is not None:
            report.write_csv(args.csv)
    except OSError as exc:
        raise CommandError(f"cannot write output: {exc}") from None
    print(f"j_uniform={_num(report.j_uniform)} j_allocated={_num(report.j_allocated)}")
    print(f"realized_ratio={_num(report.realized_ratio)} predicted_ratio={_num(report.predicted_ratio)}")
    return 0


def agrees_to_sig_figs(value: float, expected: float, digits: int = 3) -> bool:
    """True when ``value`` is within half a unit in the last kept digit of ``expected``."""
    exponent = math.floor(math.log10(abs(expected)))
    half_unit = 0.5 * 10.0 ** (exponent - digits + 1)
    return abs(value - expected) <= half_unit * (1 + 1e-12)


def run_validation(bits_list, max_iter=distortion.MAX_LLOYD_ITER, expected=None, out=None) -> bool:
    """Recompute the Lloyd-Max table, fit it, and compare with ``expected``."""
    expected = EXPECTED_LLOYD_MAX if expected is None else expected
    out = sys.stdout if out is None else out
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", distortion.LloydMaxConvergenceWarning)
        books = {b: distortion.lloyd_max_codebook(b, max_iter=max_iter) for b in bits_list}
    points = [distortion.MsePoint(b, books[b].mse) for b in bits_list]
    model = distortion.fit_exponential(points) if len(set(bits_list)) >= 2 else None
    print("bits  exact_mse  expected  fit_mse  ratio  status", file=out)
    all_ok = True
    failures = []
    for b in bits_list:
        value = books[b].mse
        want = expected.get(b)
        ok = want is not None and agrees_to_sig_figs(value, want)
        fit = distortion.eval_distortion(model, b) if model else float("nan")
        ratio = fit / value if model else float("nan")
        print(
            f"{b} {value:.6e} {want:.3e} {fit:.6e} {ratio:.6f} {'ok' if ok else 'MISMATCH'}"
            if want is not None
            else f"{b} {value:.6e} - {fit:.6e} {ratio:.6f} MISMATCH",
            file=out,
        )
        if not ok:
            all_ok = False
            failures.append(b)
    if model:
        report = distortion.fit_quality_report(points, model)
        print(
            f"fit alpha={_num(model.alpha)} beta={_num(model.beta)} r2={model.r_squared:.6f} "
            f"max_relative_error={_num(report.max_relative_error)} at bits={report.worst_bits:g}",
            file=out,
        )
    unconverged = [b for b in bits_list if not books[b].converged]
    if unconverged:
        print(f"note: not converged within {max_iter} iterations at bits {unconverged}", file=out)
    if all_ok:
        print("PASS", file=out)
    else:
        print("FAIL at bits " + ", ".join(str(b) for b in failures), file=out)
    return all_ok


def cmd_validate(args) -> int:
    bits = _bits_list(args.bits)
    for b in bits:
        if not 1 <= b <= 8:
            raise CommandError(f"--bits entries must be in 1..8, got {b}")
    ok = run_validation(bits, max_iter=args.max_iter)
    sys.stdout.flush()
    if not ok:
        print("error: Lloyd-Max table does not match the expected values", file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvbits", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="measure quantizer MSE on synthetic data")
    p.add_argument("--quantizer", required=True, help="one of: " + ", ".join(quantizers.SCHEMES))
    p.add_argument("--component", choices=distortion.COMPONENTS, default="key")
    p.add_argument("--bits", default=DEFAULT_BITS)
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=128)
    p.add_argument("--dist", choices=quantizers.DISTRIBUTIONS, default="gaussian")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit", help="fit D(b) = alpha * beta^-b to an MSE CSV")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--quantizer")
    p.add_argument("--component", choices=distortion.COMPONENTS)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("allocate", help="per-head bit allocation lookup table")
    p.add_argument("--sensitivity", type=Path, required=True)
    p.add_argument("--mode", choices=("joint", "separate"), default="separate")
    p.add_argument("--model", type=Path, help="model for joint mode, or for both sides")
    p.add_argument("--model-k", type=Path)
    p.add_argument("--model-v", type=Path)
    p.add_argument("--avg-bits", type=float, required=True)
    p.add_argument("--b-min", type=int, default=2)
    p.add_argument("--b-max", type=int, default=allocator.MAX_BITS)
    p.add_argument("--method", choices=("greedy", "continuous"), default="greedy")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("predict-gain", help="AM/GM gain prediction from sensitivities")
    p.add_argument("--sensitivity", type=Path, required=True)
    p.set_defaults(func=cmd_predict_gain)

    p = sub.add_parser("simulate", help="synthetic end-to-end check of an allocation")
    p.add_argument("--sensitivity", type=Path, required=True)
    p.add_argument("--allocation", type=Path, required=True)
    p.add_argument("--quantizer", default="lloyd_max_gaussian")
    p.add_argument("--quantizer-k")
    p.add_argument("--quantizer-v")
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=128)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--rotation-seed", type=int, help="sign seed for hadamard schemes (default: --seed)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path, help="optional per-head MSE dump")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="recompute the Lloyd-Max Gaussian table")
    p.add_argument("--bits", default="1,2,3,4,5,6")
    p.add_argument("--max-iter", type=int, default=distortion.MAX_LLOYD_ITER)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError) as exc:
        sys.stdout.flush()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
