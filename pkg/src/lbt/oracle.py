"""Independent ground-truth hypergradients and comparison metrics.

``fd_hypergradient`` differentiates the composite validation objective by
central differences over every architecture coordinate, recomputing both
virtual steps and the pseudo-labels from scratch at each probe point.  It
never touches the engine's own hypergradient formulas, so agreement between
the two is evidence, not tautology.  ``unrolled_hypergradient`` is the exact
reverse-mode gradient through both virtual steps; cross-agreement between
the two oracles is the root of trust.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TaskSpec, generate
from .engine import Engine, SearchConfig
from .nets import ArchParams, StudentSpec, TeacherSpec, init_weights
from .weights import WeightSet


@dataclass
class GradComparison:
    """Agreement metrics between a candidate and a reference gradient."""

    cosine: float
    rel_l2: float
    max_abs_err: float
    n: int
    table: list[tuple[int, float, float]] | None = None

    def format_report(self, label: str = "gradient comparison") -> str:
        lines = [
            f"{label}:",
            f"  coordinates      {self.n}",
            f"  cosine           {self.cosine:+.6f}",
            f"  relative L2      {self.rel_l2:.3e}",
            f"  max abs error    {self.max_abs_err:.3e}",
        ]
        if self.table is not None:
            lines.append("  idx    candidate        reference")
            for i, c, r in self.table:
                lines.append(f"  {i:4d}  {c:+.8e}  {r:+.8e}")
        return "\n".join(lines)


def compare(candidate: np.ndarray, reference: np.ndarray,
            with_table: bool = False) -> GradComparison:
    """Cosine similarity, relative L2 error, and max coordinate error.

    Defined only for a nonzero reference.
    """
    cand = np.asarray(candidate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if cand.shape != ref.shape:
        raise ValueError(f"length mismatch: {cand.shape} vs {ref.shape}")
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise ValueError("reference gradient has zero norm")
    cand_norm = float(np.linalg.norm(cand))
    if cand_norm == 0.0:
        cosine = 0.0
    else:
        cosine = float(np.clip(np.dot(cand, ref) / (cand_norm * ref_norm), -1.0, 1.0))
    diff = cand - ref
    table = None
    if with_table:
        table = [(i, float(cand[i]), float(ref[i])) for i in range(len(ref))]
    return GradComparison(
        cosine=cosine,
        rel_l2=float(np.linalg.norm(diff) / ref_norm),
        max_abs_err=float(np.max(np.abs(diff))) if len(diff) else 0.0,
        n=len(ref),
        table=table,
    )


def fd_hypergradient(objective, arch: ArchParams | np.ndarray,
                     h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar objective over every coordinate.

    ``objective`` must be a deterministic function of the scalar matrix.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    scalars = arch.scalars if isinstance(arch, ArchParams) else np.asarray(arch)
    base = np.array(scalars, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(objective(base))
        flat[i] = orig - h
        f_minus = float(objective(base))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"objective is non-finite near coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def unrolled_hypergradient(engine: Engine, arch: ArchParams,
                           t_weights: WeightSet, s_weights: WeightSet,
                           max_params: int = 20_000) -> np.ndarray:
    """Exact reverse-mode gradient of the composite objective over A,
    treating both virtual steps as differentiable compositions."""
    if engine.n_params > max_params:
        raise ValueError(
            f"instance has {engine.n_params} parameters, above the "
            f"{max_params} ceiling for full unrolling")
    return engine.unrolled_arch_grad(arch, t_weights, s_weights)


# ----------------------------------------------------------------------
# seeded battery of small, well-conditioned instances


def make_small_instance(seed: int, objective: str = "full",
                        hypergrad_mode: str = "finite_difference",
                        lam: float = 1.0, gamma: float = 1.0,
                        xi_t: float = 0.1, xi_s: float = 0.1):
    """A tiny search problem (well under 200 trainable scalars) with smooth
    candidate ops, plus initialized architecture and weights."""
    task = TaskSpec(family="gaussian_blobs", n_classes=3, feature_dim=3,
                    n_teacher_train=12, n_teacher_val=10, n_student_train=12,
                    n_student_val=10, n_unlabeled=8, n_test=20,
                    label_noise=0.0, seed=seed)
    bundle = generate(task)
    teacher = TeacherSpec(feature_dim=3, n_classes=3, hidden_dim=3, n_nodes=2,
                          n_cells=1,
                          candidates=("zero", "identity", "linear", "linear_tanh"))
    student = StudentSpec(feature_dim=3, n_classes=3, hidden=(3,),
                          activation="tanh", capacity="small")
    config = SearchConfig(lam=lam, gamma=gamma, xi_t=xi_t, xi_s=xi_s, eta=0.1,
                          epochs=0, hypergrad_mode=hypergrad_mode,
                          objective=objective, seed=seed)
    engine = Engine(teacher, student, bundle, config)
    arch = ArchParams(
        np.random.default_rng(seed + 17).normal(0.0, 0.4,
                                                (teacher.n_edges, 4)),
        teacher.candidates)
    t_weights = init_weights(teacher, seed)
    s_weights = init_weights(student, seed + 1)
    return engine, arch, t_weights, s_weights


def engine_fd_arch_grad(engine: Engine, arch: ArchParams,
                        t_weights: WeightSet, s_weights: WeightSet) -> np.ndarray:
    """The engine's finite-difference-mode combined architecture gradient at
    one point (the quantity the oracles check)."""
    cfg = engine.cfg
    t_virtual, _, _ = engine.teacher_virtual_step(arch, t_weights)
    g_teacher, _ = engine.grad_arch_teacher_val(arch, t_weights, t_virtual)
    if cfg.objective == "bilevel":
        return g_teacher
    pl = engine.pseudo_label(arch, t_virtual)
    _, _, _, g_s = engine.student_objective(s_weights, pl)
    s_virtual = engine.student_virtual_step(s_weights, g_s)
    g_student, _ = engine.grad_arch_student_val(
        arch, t_weights, s_weights, t_virtual, s_virtual)
    if cfg.objective == "ablation1":
        return cfg.gamma * g_student
    return g_teacher + cfg.gamma * g_student


def run_gradcheck(seeds, fd_h: float = 1e-4,
                  cosine_threshold: float = 0.99,
                  unrolled_rel_l2_threshold: float = 1e-4,
                  step_consistency_threshold: float = 1e-3,
                  corrupt_sign: bool = False):
    """Oracle battery over seeded tiny instances.

    Checks, per instance: the finite-difference-mode engine gradient against
    the coordinate-wise oracle (cosine), the unrolled gradient against the
    same oracle (relative L2, the cross-oracle root of trust), and the
    oracle's own two-step-size consistency.  Returns (passed, rows).
    ``corrupt_sign`` is a test hook that flips the engine gradient so the
    battery must fail.
    """
    rows = []
    passed = True
    for seed in seeds:
        engine, arch, t_w, s_w = make_small_instance(seed)
        objective = engine.composite_objective(t_w, s_w, arch)
        reference = fd_hypergradient(objective, arch, h=fd_h)
        reference_finer = fd_hypergradient(objective, arch, h=fd_h / 10.0)
        unrolled = unrolled_hypergradient(engine, arch, t_w, s_w)
        fd_mode = engine_fd_arch_grad(engine, arch, t_w, s_w)
        if corrupt_sign:
            fd_mode = -fd_mode
        cmp_fd = compare(fd_mode, reference)
        cmp_unrolled = compare(unrolled, reference)
        cmp_steps = compare(reference_finer, reference)
        ok = (cmp_fd.cosine >= cosine_threshold and
              cmp_unrolled.rel_l2 <= unrolled_rel_l2_threshold and
              cmp_steps.rel_l2 <= step_consistency_threshold)
        passed = passed and ok
        rows.append({
            "seed": seed,
            "fd_mode_cosine": cmp_fd.cosine,
            "fd_mode_rel_l2": cmp_fd.rel_l2,
            "unrolled_rel_l2": cmp_unrolled.rel_l2,
            "unrolled_cosine": cmp_unrolled.cosine,
            "step_consistency_rel_l2": cmp_steps.rel_l2,
            "max_abs_err": cmp_unrolled.max_abs_err,
            "ok": ok,
        })
    return passed, rows
