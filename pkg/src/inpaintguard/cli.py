"""Command line surface for the package.

Eight subcommands cover the whole workflow: sample data generation,
denoiser training, perturbation protection, inpainting, batch
evaluation, attention heatmaps, gradient verification, and shifted
mask generation.

Conventions: exit status 0 on success, 1 for usage or configuration
errors, 2 for runtime failures. Diagnostics are written to stderr;
machine readable results go only to the paths named by flags. An
optional --config JSON file supplies defaults for train / protect /
inpaint; unknown sections or keys are rejected, and explicit flags
always win over file values.
"""

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import tensor as tz
from .attack import (
    OBJECTIVES,
    STAGES,
    AttackConfig,
    _StageInputs,
    objective_loss,
    protect,
)
from .container import write_file
from .dataset import gen_dataset, load_dataset, prompt_tokens
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint
from .diffusion import NoiseSchedule, SamplerConfig, inpaint_sample
from .errors import ConfigError, NumericError
from .experiment import plan_from_json, run_experiment, tap_pass
from .imageio import read_image, write_image
from .masks import (
    Box,
    all_keep_mask,
    classify_hole,
    mask_to_pgm,
    pgm_to_mask,
    random_shift_mask,
)
from .metrics import attention_pca_map, heatmap_to_pgm, psnr
from .tensor import Tensor
from .training import TrainConfig, train

GRADCHECK_TOL = 1e-6

# flag-overridable keys accepted per --config section
_CONFIG_SECTIONS = {
    "train": ("steps", "batch", "lr", "beta1", "beta2", "adam_eps",
              "cond_dropout", "seed", "checkpoint_every"),
    "attack": ("eta", "alpha0", "iters", "objective", "stages", "rho",
               "seed", "loss_scale"),
    "sampler": ("steps", "guidance", "seed"),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse: surface usage problems as exceptions, not sys.exit
    def error(self, message):
        raise _UsageError(message)


def _note(msg):
    print(msg, file=sys.stderr)


def _load_run_config(path):
    """Parse a --config JSON file; unknown sections or keys fail closed."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    for name, section in doc.items():
        if name not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        for key in section:
            if key not in _CONFIG_SECTIONS[name]:
                raise ConfigError(f"unknown config key {name}.{key}")
    return doc


def _pick(flag_value, section, key, default):
    if flag_value is not None:
        return flag_value
    if key in section:
        return section[key]
    return default


def _parse_boxes(text):
    """Comma list of x0,y0,x1,y1 groups -> list of Box."""
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--box expects integers, got {text!r}") from None
    if not vals or len(vals) % 4:
        raise ConfigError("--box needs coordinates in groups of four")
    boxes = []
    for i in range(0, len(vals), 4):
        try:
            boxes.append(Box(*vals[i:i + 4]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return boxes


# ---------------------------------------------------------------------------
# gradient verification suite


def _primitive_checks(step, seed, out):
    """Max relative gradcheck error for every differentiable primitive.

    Every coordinate of every input is probed, so the result does not
    depend on probe sampling. Scalar objectives are built as squared
    distance to a fixed offset target, which keeps every coordinate's
    gradient well away from zero.
    """
    rng = np.random.default_rng(seed)

    def data(*shape):
        return rng.uniform(0.3, 0.9, size=shape)

    def check(name, op, x0, out_shape=None):
        base = np.asarray(x0, dtype=np.float64)
        if out_shape is None:
            out_shape = op(Tensor(base)).data.shape
        shift = rng.uniform(0.5, 1.0, size=out_shape)
        shift *= rng.choice([-1.0, 1.0], size=out_shape)
        target = Tensor(op(Tensor(base)).data + shift)

        def f(t):
            return tz.frobenius_sq(op(t), target)

        out[name] = tz.gradient_check(f, Tensor(base), step=step,
                                      coords=base.size, seed=seed)

    a34, b34 = data(3, 4), data(3, 4)
    check("add", lambda t: tz.add(t, Tensor(b34)), a34)
    check("sub", lambda t: tz.sub(t, Tensor(b34)), a34)
    check("mul", lambda t: tz.mul(t, Tensor(b34)), a34)
    check("neg", tz.neg, a34)
    check("scale", lambda t: tz.scale(t, 1.7), a34)
    check("add_scalar", lambda t: tz.add_scalar(t, 0.4), a34)
    check("silu", tz.silu, data(4, 5) * 4 - 2)
    check("reshape", lambda t: tz.reshape(t, (2, 6)), a34)
    check("transpose", lambda t: tz.transpose(t, (1, 0)), a34)
    check("concat", lambda t: tz.concat([t, Tensor(b34)], 0), a34)
    check("softmax_lastdim", tz.softmax_lastdim, data(3, 5) * 3)

    g, bta = data(6), data(6)
    x6 = data(4, 6) * 2 - 1
    check("layer_norm.x",
          lambda t: tz.layer_norm(t, Tensor(g), Tensor(bta)), x6)
    check("layer_norm.gamma",
          lambda t: tz.layer_norm(Tensor(x6), t, Tensor(bta)), g)
    check("layer_norm.beta",
          lambda t: tz.layer_norm(Tensor(x6), Tensor(g), t), bta)

    m45, m53 = data(4, 5), data(5, 3)
    check("matmul.left", lambda t: tz.matmul(t, Tensor(m53)), m45)
    check("matmul.right", lambda t: tz.matmul(Tensor(m45), t), m53)
    s245, s253 = data(2, 4, 5), data(2, 5, 3)
    check("matmul.stacked",
          lambda t: tz.matmul(t, Tensor(s253)), s245)
    check("matmul.linear",
          lambda t: tz.matmul(Tensor(s245), t), m53)

    xc = data(1, 2, 5, 5)
    w = data(3, 2, 3, 3) - 0.6
    bias = data(3)
    check("conv2d.x",
          lambda t: tz.conv2d(t, Tensor(w), Tensor(bias), 1, 1), xc)
    check("conv2d.w",
          lambda t: tz.conv2d(Tensor(xc), t, Tensor(bias), 1, 1), w)
    check("conv2d.bias",
          lambda t: tz.conv2d(Tensor(xc), Tensor(w), t, 1, 1), bias)
    check("conv2d.strided",
          lambda t: tz.conv2d(t, Tensor(w), None, 2, 0), data(1, 2, 7, 7))
    check("avgpool2x2", tz.avgpool2x2, data(1, 2, 4, 4))
    check("upsample_nearest2x", tz.upsample_nearest2x, data(1, 2, 3, 3))

    ids = np.array([0, 2, 2, 1])
    check("embedding", lambda t: tz.embedding(ids, t), data(4, 3))
    xb, b4 = data(2, 3, 4), data(4)
    check("add_bias_lastdim.x",
          lambda t: tz.add_bias_lastdim(t, Tensor(b4)), xb,
          out_shape=xb.shape)
    check("add_bias_lastdim.b",
          lambda t: tz.add_bias_lastdim(Tensor(xb), t), b4,
          out_shape=xb.shape)
    xs, vs = data(1, 3, 4, 4), data(1, 3)
    check("add_spatial_bias.x",
          lambda t: tz.add_spatial_bias(t, Tensor(vs)), xs,
          out_shape=xs.shape)
    check("add_spatial_bias.v",
          lambda t: tz.add_spatial_bias(Tensor(xs), t), vs,
          out_shape=xs.shape)

    fro_b = data(3, 4)
    out["frobenius_sq.left"] = tz.gradient_check(
        lambda t: tz.frobenius_sq(t, Tensor(fro_b)), Tensor(a34 + 1.0),
        step=step, coords=a34.size, seed=seed)
    out["frobenius_sq.right"] = tz.gradient_check(
        lambda t: tz.frobenius_sq(Tensor(a34 + 1.0), t), Tensor(fro_b),
        step=step, coords=fro_b.size, seed=seed)
    out["sum_all"] = tz.gradient_check(
        tz.sum_all, Tensor(a34), step=step, coords=a34.size, seed=seed)
    # mean gradient is 1/n per coordinate; scale keeps it order one
    out["mean_all"] = tz.gradient_check(
        lambda t: tz.scale(tz.mean_all(t), float(a34.size)), Tensor(a34),
        step=step, coords=a34.size, seed=seed)


def _objective_checks(step, seed, out):
    """Gradcheck each attack objective end to end on a tiny denoiser.

    The fixture is pinned (weights, anchor noise, probe point) so that
    every coordinate of the probe image carries a gradient large enough
    to dominate finite difference roundoff; the probe seed then only
    chooses which coordinates are sampled.
    """
    cfg = DenoiserConfig(image_size=8, base_width=8, deep_width=16,
                         token_dim=8, time_dim=16)
    model = Denoiser.fresh(cfg, seed=11, zero_head=False)
    model.set_trainable(False)
    stage = _StageInputs(model, all_keep_mask((8, 8)), np.array([1, 2, 3, 0]),
                         np.random.default_rng(0).standard_normal((1, 4, 4, 4)),
                         NoiseSchedule())
    x = np.random.default_rng(11).random((1, 3, 8, 8))
    _, _, clean = stage.run(Tensor(x), True)
    start = Tensor(x + 0.05)
    for kind in OBJECTIVES:
        acfg = AttackConfig(objective=kind, stages="single", seed=0)

        def f(t, acfg=acfg):
            return objective_loss(acfg, stage, t, clean)

        out[f"objective.{kind}"] = tz.gradient_check(f, start, step=step,
                                                     coords=24, seed=seed)


def run_gradcheck(seed=0, step=1e-5):
    """Name -> max relative gradcheck error, primitives then objectives."""
    results = {}
    _primitive_checks(step, seed, results)
    _objective_checks(step, seed, results)
    return results


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_dataset_gen(args):
    gen_dataset(args.count, args.seed, args.out)
    _note(f"wrote {args.count} samples to {args.out}")


def _cmd_train(args):
    section = _load_run_config(args.config).get("train", {})
    steps = _pick(args.steps, section, "steps", None)
    if steps is None:
        raise ConfigError("train needs --steps (or a config train.steps)")
    kwargs = {"steps": int(steps),
              "seed": int(_pick(args.seed, section, "seed", 0))}
    for key in ("batch", "lr", "beta1", "beta2", "adam_eps", "cond_dropout",
                "checkpoint_every"):
        if key in section:
            kwargs[key] = section[key]
    dataset = load_dataset(args.data)
    result = train(dataset, TrainConfig(**kwargs), out_path=args.out)
    _note(f"trained {kwargs['steps']} steps, final loss "
          f"{result.losses[-1]:.6f}, checkpoint {args.out}")


def _cmd_protect(args):
    section = _load_run_config(args.config).get("attack", {})
    cfg = AttackConfig(
        eta=float(_pick(args.eta, section, "eta", 0.06)),
        alpha0=float(_pick(args.alpha, section, "alpha0", 0.03)),
        iters=int(_pick(args.iters, section, "iters", 250)),
        objective=_pick(args.objective, section, "objective", "attn"),
        stages=_pick(args.stages, section, "stages", "two"),
        rho=float(_pick(args.rho, section, "rho", 1.2)),
        seed=int(_pick(args.seed, section, "seed", 0)),
        loss_scale=float(section.get("loss_scale", 1.0)),
    )
    boxes = _parse_boxes(args.box) if args.box else []
    model, _ = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    result = protect(model, image, boxes, cfg)
    write_image(args.out, result.image_adv)
    if args.delta:
        echo = {k: v for k, v in asdict(result.config).items()
                if k != "target_latent"}
        entries = {
            "delta": result.delta,
            "config": np.frombuffer(
                json.dumps(echo, sort_keys=True).encode("utf-8"),
                dtype=np.uint8).copy(),
        }
        for k, support in enumerate(result.supports):
            entries[f"support.{k}"] = support.astype(np.uint8)
        for k, trace in enumerate(result.traces):
            entries[f"trace.{k}"] = np.asarray(trace, dtype=np.float64)
        write_file(args.delta, entries)
    _note(f"protected over {len(result.supports)} stage(s), "
          f"{result.iterations} iterations, objective {cfg.objective}, "
          f"psnr {psnr(image, result.image_adv):.2f} dB")


def _cmd_inpaint(args):
    section = _load_run_config(args.config).get("sampler", {})
    sampler = SamplerConfig(
        steps=int(_pick(args.steps, section, "steps", 50)),
        guidance=float(_pick(args.guidance, section, "guidance", 7.5)),
        seed=int(_pick(args.seed, section, "seed", 0)),
    )
    model, _ = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    with open(args.mask, "rb") as fh:
        mask = pgm_to_mask(fh.read())
    tokens = prompt_tokens(args.prompt, model.config.prompt_len,
                           model.config.vocab)
    out = inpaint_sample(model, image, mask, tokens, sampler)
    write_image(args.out, out)
    _note(f"inpainted {args.image} -> {args.out} "
          f"({sampler.steps} steps, guidance {sampler.guidance})")


def _cmd_evaluate(args):
    with open(args.plan, "r", encoding="utf-8") as fh:
        plan = plan_from_json(fh.read())
    model, _ = load_checkpoint(args.ckpt)
    summary = run_experiment(plan, model, args.out_dir)
    _note(f"evaluated {summary['row_count']} rows "
          f"({len(summary['failures'])} failed) -> {args.out_dir}")


def _cmd_attmap(args):
    model, _ = load_checkpoint(args.ckpt)
    c = model.config
    image = read_image(args.image)
    with open(args.mask, "rb") as fh:
        mask = pgm_to_mask(fh.read())
    tokens = prompt_tokens(args.prompt, c.prompt_len, c.vocab)
    # fixed-noise pass: the map depends only on the published inputs
    eps = np.random.default_rng(0).standard_normal(
        (1, c.latent_channels, c.latent_size, c.latent_size))
    taps = tap_pass(model, image, mask, tokens, eps, t=args.timestep)
    layer = int(args.layer) if args.layer.isdigit() else args.layer
    heat, degenerate = attention_pca_map(taps, layer, args.branch)
    if degenerate:
        _note("warning: degenerate activation spread, heatmap is flat")
    with open(args.out, "wb") as fh:
        fh.write(heatmap_to_pgm(heat))
    _note(f"attention map layer {args.layer} ({args.branch}) -> {args.out}")


def _cmd_gradcheck(args):
    if not (1e-7 <= args.eps <= 1e-3):
        raise ConfigError("--eps must lie in [1e-7, 1e-3]")
    results = run_gradcheck(args.seed, args.eps)
    worst = 0.0
    for name, err in results.items():
        _note(f"  {name:<24s} {err:.3e}")
        worst = max(worst, err)
    verdict = "ok" if worst <= GRADCHECK_TOL else "FAIL"
    _note(f"gradcheck: {len(results)} checks, worst {worst:.3e}, "
          f"tolerance {GRADCHECK_TOL:.0e}: {verdict}")
    if worst > GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {worst:.3e} > "
                           f"{GRADCHECK_TOL:.0e}")


def _cmd_shiftmask(args):
    with open(args.mask, "rb") as fh:
        mask = pgm_to_mask(fh.read())
    boxes = _parse_boxes(args.box)
    if len(boxes) != 1:
        raise ConfigError("shiftmask takes exactly one box")
    rng = np.random.default_rng(args.seed)
    shifted, label = random_shift_mask(mask, boxes[0], args.max_shift, rng)
    with open(args.out, "wb") as fh:
        fh.write(mask_to_pgm(shifted))
    label = label.value
    sidecar = {"label": label, "box": [boxes[0].x0, boxes[0].y0,
                                       boxes[0].x1, boxes[0].y1],
               "max_shift": args.max_shift, "seed": args.seed}
    with open(f"{args.out}.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    _note(f"shifted mask -> {args.out} (hole {label} the box)")


# ---------------------------------------------------------------------------
# parser assembly


def _build_parser():
    parser = _Parser(prog="inpaintguard",
                     description="latent inpainting and protection toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", metavar="action")
    g = dsub.add_parser("gen", help="generate a procedural shape dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=16,
                   help="number of samples (default 16)")
    g.add_argument("--seed", type=int, default=0,
                   help="generation seed (default 0)")
    g.set_defaults(handler=_cmd_dataset_gen)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int,
                   help="optimizer steps (here or in --config)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--config", help="JSON config file (flags win)")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("protect", help="compute a protective perturbation")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--box", help="object boxes x0,y0,x1,y1[,...]")
    p.add_argument("--rho", type=float,
                   help="box enlargement factor (default 1.2)")
    p.add_argument("--eta", type=float,
                   help="perturbation budget (default 0.06)")
    p.add_argument("--alpha", type=float,
                   help="initial step size (default 0.03)")
    p.add_argument("--iters", type=int,
                   help="ascent iterations per stage (default 250)")
    p.add_argument("--objective", choices=OBJECTIVES,
                   help="ascent objective (default attn)")
    p.add_argument("--stages", choices=STAGES,
                   help="stage layout (default two)")
    p.add_argument("--seed", type=int, help="attack seed (default 0)")
    p.add_argument("--out", required=True, help="protected PPM output")
    p.add_argument("--delta", help="optional perturbation container output")
    p.add_argument("--config", help="JSON config file (flags win)")
    p.set_defaults(handler=_cmd_protect)

    p = sub.add_parser("inpaint", help="run masked sampling")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--mask", required=True, help="keep-mask PGM")
    p.add_argument("--prompt", default="",
                   help="prompt text (default: null prompt)")
    p.add_argument("--steps", type=int, help="sampler steps (default 50)")
    p.add_argument("--guidance", type=float,
                   help="guidance strength (default 7.5)")
    p.add_argument("--seed", type=int, help="sampler seed (default 0)")
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--config", help="JSON config file (flags win)")
    p.set_defaults(handler=_cmd_inpaint)

    p = sub.add_parser("evaluate", help="run an experiment plan")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--plan", required=True, help="experiment plan JSON")
    p.add_argument("--out-dir", required=True, help="report directory")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("attmap", help="attention component heatmap")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--mask", required=True, help="keep-mask PGM")
    p.add_argument("--prompt", default="",
                   help="prompt text (default: null prompt)")
    p.add_argument("--layer", default="1",
                   help="layer index or name (default 1)")
    p.add_argument("--branch", default="self", choices=("self", "cross"),
                   help="attention branch (default self)")
    p.add_argument("--timestep", type=int, default=None,
                   help="diffusion timestep (default: attack timestep 1000)")
    p.add_argument("--out", required=True, help="heatmap PGM output")
    p.set_defaults(handler=_cmd_attmap)

    p = sub.add_parser("gradcheck", help="verify gradients end to end")
    p.add_argument("--seed", type=int, default=0,
                   help="probe sampling seed (default 0)")
    p.add_argument("--eps", type=float, default=1e-5,
                   help="finite difference step (default 1e-5)")
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("shiftmask", help="randomly shifted copy of a mask")
    p.add_argument("--mask", required=True, help="input mask PGM")
    p.add_argument("--box", required=True, help="object box x0,y0,x1,y1")
    p.add_argument("--seed", type=int, default=0,
                   help="shift seed (default 0)")
    p.add_argument("--max-shift", type=int, default=8,
                   help="largest shift per axis (default 8)")
    p.add_argument("--out", required=True, help="shifted mask PGM output")
    p.set_defaults(handler=_cmd_shiftmask)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    handler = getattr(args, "handler", None)
    if handler is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        handler(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
