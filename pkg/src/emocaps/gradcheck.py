"""Per-component finite-difference gradient report at toy dimensions."""
import time
from dataclasses import dataclass

from . import context, emoformer
from . import tensor as tc
from .config import ModelConfig
from .data import SynthSpec, generate_synthetic
from .model import EmoCaps, collate

TOLERANCE = 1e-4

TOY_MODEL = dict(text_dim=16, audio_dim=16, visual_dim=16, text_emotion_dim=8,
                 audio_emotion_dim=8, visual_emotion_dim=8, n_heads=4, hidden_dim=8,
                 mlp_dim=8, n_classes=4, dropout=0.1)


@dataclass
class GradcheckRow:
    component: str
    n_params: int
    max_rel_error: float
    worst_param: str
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _check(name, f, params, h, corrupt):
    hook = None
    if corrupt == name:
        def hook(grads):
            key = next(iter(grads))
            grads[key] = grads[key] * 1.01 + 1e-3
    t0 = time.perf_counter()
    worst, errors = tc.finite_difference_check(f, params, h=h, return_details=True,
                                               grad_hook=hook)
    worst_param = max(errors, key=errors.get)
    return GradcheckRow(name, sum(p.size for p in params.values()), worst, worst_param,
                        time.perf_counter() - t0)


def run_gradcheck(model_overrides=None, seed=0, h=1e-5, seq_len=3, corrupt=None):
    """Check every trainable component; returns a list of :class:`GradcheckRow`.

    ``corrupt`` names a component whose analytic gradient is deliberately
    perturbed before comparison (negative control).
    """
    cfg = ModelConfig(**{**TOY_MODEL, **(model_overrides or {}), "dtype": "float64"})
    rng = tc.Rng(seed)
    model = EmoCaps(cfg, seed=seed)
    rows = []

    for modality in ("audio", "visual"):
        ecfg = cfg.emoformer(modality)
        params = model.group(modality)
        U = tc.Tensor(rng.normal((seq_len, ecfg.d_model)), requires_grad=True)
        c = rng.normal((ecfg.d_emotion,))
        rows.append(_check(
            f"emoformer.{modality}",
            lambda p=params, U=U, c=c, e=ecfg: tc.sum_all(tc.mul(emoformer.emoformer_forward(U, p, e), c)),
            {**params, "input": U}, h, corrupt))

    tparams = model.group("text")
    Ut = tc.Tensor(rng.normal((seq_len, cfg.text_dim)), requires_grad=True)
    ct = rng.normal((seq_len, cfg.text_emotion_dim))
    rows.append(_check("text_path",
                       lambda: tc.sum_all(tc.mul(emoformer.text_emotion_path(Ut, tparams), ct)),
                       {**tparams, "input": Ut}, h, corrupt))

    ctx = model.group("context")
    lengths = [3, 2]
    X = tc.Tensor(rng.normal((sum(lengths), cfg.capsule_dim)), requires_grad=True)
    cc = rng.normal((sum(lengths), 2 * cfg.hidden_dim))
    lstm_params = {k: v for k, v in ctx.items() if k.startswith(("fwd.", "bwd."))}
    rows.append(_check("bilstm",
                       lambda: tc.sum_all(tc.mul(context.bilstm_context(X, ctx, lengths), cc)),
                       {**lstm_params, "input": X}, h, corrupt))

    head_params = {k: v for k, v in ctx.items() if not k.startswith(("fwd.", "bwd."))}
    C = tc.Tensor(rng.normal((5, 2 * cfg.hidden_dim)), requires_grad=True)
    y = rng.integers(0, cfg.n_classes, size=5)
    rows.append(_check("head", lambda: tc.cross_entropy(context.head_logits(C, ctx), y),
                       {**head_params, "input": C}, h, corrupt))

    spec = SynthSpec(n_dialogues=2, min_utterances=3, max_utterances=3, n_classes=cfg.n_classes,
                     text_dim=cfg.text_dim, audio_dim=cfg.audio_dim, visual_dim=cfg.visual_dim,
                     audio_len=seq_len, visual_len=seq_len, seed=seed)
    dialogues, _ = generate_synthetic(spec)
    batch = collate(dialogues)
    rows.append(_check("end_to_end", lambda: model.loss(batch), model.params, h, corrupt))
    return rows


def format_rows(rows):
    lines = [f"{'component':<18} {'params':>7} {'max_rel_err':>12} {'seconds':>8}  status  worst"]
    for r in rows:
        lines.append(f"{r.component:<18} {r.n_params:>7} {r.max_rel_error:>12.3e} "
                     f"{r.seconds:>8.2f}  {'pass' if r.passed else 'FAIL':<6}  {r.worst_param}")
    return "\n".join(lines)


def worst(rows):
    return max(rows, key=lambda r: r.max_rel_error) if rows else None
