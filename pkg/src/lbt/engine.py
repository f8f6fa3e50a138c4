"""Three-stage teacher/student search loop with one-step hypergradients.

Each iteration runs three stages.  Stage 1 commits a gradient step on the
teacher weights against the teacher training split.  Stage 2 pseudo-labels
the unlabeled pool with the current teacher and commits a student step on
the combined human-label plus pseudo-label objective.  Stage 3 recomputes
*virtual* (non-committing) one-step updates of both models and descends the
architecture scalars along the gradient of the combined validation
objective, approximating the two Hessian-vector products by symmetric
finite differences, or differentiating exactly through both virtual steps
when the unrolled mode is selected.

All three hypergradient routes (finite-difference formulas, exact unrolling,
and the numerical oracle that checks them) target the same composite
objective: the virtual teacher update sees the live architecture; the
teacher validation loss sees the live architecture both directly and through
the virtual weights; pseudo-labels depend on the architecture only through
the virtual teacher weights, so the mixing weights inside the pseudo-label
forward pass are held at the current iterate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Graph, NonFiniteError, softmax_array
from .data import DataBundle, LabeledSet
from .nets import (ArchParams, Genotype, StudentSpec, TeacherSpec,
                   derive_genotype, init_arch, init_weights, student_forward,
                   student_logits, student_spec, teacher_forward, teacher_logits)
from .weights import WeightSet

OBJECTIVE_MODES = ("full", "ablation1", "ablation2", "bilevel")
HYPERGRAD_MODES = ("finite_difference", "exact_unrolled")

_SEED_STRIDE = 1_000_003  # offsets for teacher/student/batch sub-streams


class DivergenceError(RuntimeError):
    """A tracked loss exceeded the divergence limit or went non-finite."""


@dataclass(frozen=True)
class SearchConfig:
    """Hyperparameters of one search run."""

    lam: float = 1.0            # pseudo-label loss weight
    gamma: float = 1.0          # student-validation weight
    xi_t: float = 0.1           # teacher virtual-step rate
    xi_s: float = 0.1           # student virtual-step rate
    eta: float = 0.25           # architecture learning rate
    lr_t: float | None = None   # committed teacher rate; defaults to xi_t
    lr_s: float | None = None   # committed student rate; defaults to xi_s
    epochs: int = 200
    batch_size: int = 0         # 0 = full batch
    c_fd: float = 0.01          # alpha = c_fd / ||carried vector||_2
    hypergrad_mode: str = "finite_difference"
    objective: str = "full"
    arch_momentum: float = 0.0
    seed: int = 0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.xi_t < 0 or self.xi_s < 0 or self.eta < 0:
            raise ValueError("step rates must be nonnegative")
        if self.c_fd <= 0:
            raise ValueError("c_fd must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        if self.hypergrad_mode not in HYPERGRAD_MODES:
            raise ValueError(f"hypergrad_mode must be one of {HYPERGRAD_MODES}")
        if self.objective not in OBJECTIVE_MODES:
            raise ValueError(f"objective must be one of {OBJECTIVE_MODES}")
        if self.epochs < 0 or self.batch_size < 0:
            raise ValueError("epochs and batch_size must be nonnegative")
        if (self.lr_t is not None and self.lr_t <= 0) or \
           (self.lr_s is not None and self.lr_s <= 0):
            raise ValueError("committed rates must be positive when given")
        if self.hypergrad_mode == "exact_unrolled" and self.batch_size > 0:
            raise ValueError("exact_unrolled mode runs full batch only")

    @property
    def commit_lr_t(self) -> float:
        return self.xi_t if self.lr_t is None else self.lr_t

    @property
    def commit_lr_s(self) -> float:
        return self.xi_s if self.lr_s is None else self.lr_s


@dataclass
class StepTrace:
    """Per-iteration record of the quantities the loop computed."""

    iteration: int
    teacher_train_loss: float
    o_s: float
    o_s_train: float
    o_s_pseudo: float
    o_v: float
    o_v_teacher: float
    o_v_student: float
    grad_norm_t: float
    grad_norm_s: float
    grad_norm_a: float
    lam: float
    gamma: float
    wall_time_s: float = 0.0

    def to_record(self) -> dict:
        """Serializable record.  Wall time stays in memory only, so trace
        streams from identical runs are byte-identical."""
        return {
            "iteration": self.iteration,
            "teacher_train_loss": self.teacher_train_loss,
            "o_s": self.o_s,
            "o_s_train": self.o_s_train,
            "o_s_pseudo": self.o_s_pseudo,
            "o_v": self.o_v,
            "o_v_teacher": self.o_v_teacher,
            "o_v_student": self.o_v_student,
            "grad_norm_t": self.grad_norm_t,
            "grad_norm_s": self.grad_norm_s,
            "grad_norm_a": self.grad_norm_a,
            "lam": self.lam,
            "gamma": self.gamma,
        }


@dataclass(frozen=True)
class PseudoLabeledSet:
    """Unlabeled inputs paired with teacher-predicted class distributions."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.labels):
            raise ValueError("inputs and labels must have equal length")
        if len(self.labels) and np.max(np.abs(self.labels.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("pseudo-label rows must sum to 1 within 1e-9")

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class SearchResult:
    arch: ArchParams
    genotype: Genotype
    traces: list[StepTrace]
    teacher_weights: WeightSet
    student_weights: WeightSet
    arch_history: list[np.ndarray] | None = None
    max_pseudo_rowsum_dev: float = 0.0


def one_hot(y: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k, dtype=np.float64)[np.asarray(y, dtype=np.int64)]


def evaluate_classifier(forward: Callable[[np.ndarray], np.ndarray],
                        dataset: LabeledSet) -> float:
    """Fraction of examples where argmax(logits) differs from the label.

    Argmax ties resolve to the lowest class index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(dataset.x)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred != dataset.y))


def _rowsum_dev(labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.max(np.abs(labels.sum(axis=1) - 1.0)))


class Engine:
    """Prebuilt graphs plus the stage operations for one search problem.

    The engine is stateless across calls: every method takes the weights and
    architecture it should evaluate, so oracle probes cannot perturb a
    running search.
    """

    def __init__(self, teacher: TeacherSpec, student: StudentSpec,
                 bundle: DataBundle, config: SearchConfig):
        if bundle.feature_dim != teacher.feature_dim or \
           bundle.n_classes != teacher.n_classes:
            raise ValueError("teacher spec does not match the data bundle")
        if bundle.feature_dim != student.feature_dim or \
           bundle.n_classes != student.n_classes:
            raise ValueError("student spec does not match the data bundle")
        self.teacher = teacher
        self.student = student
        self.bundle = bundle
        self.cfg = config
        self._t_names = tuple(init_weights(teacher, 0).names())
        self._s_names = tuple(init_weights(student, 0).names())

        k = bundle.n_classes
        self._splits = {
            name: (ds.x, one_hot(ds.y, k))
            for name, ds in bundle.labeled_splits().items()
        }
        self._xu = bundle.unlabeled.x
        self._empty_pl = np.zeros((0, k))

        self._build_teacher_graph()
        self._build_student_graph()
        self._build_chain_graph()
        self._composite = None
        if config.hypergrad_mode == "exact_unrolled":
            self._ensure_composite()

    @property
    def n_params(self) -> int:
        """Trainable scalar count: teacher + student weights + arch scalars."""
        return (init_weights(self.teacher, 0).size +
                init_weights(self.student, 0).size +
                self.teacher.n_edges * self.teacher.n_candidates)

    # ------------------------------------------------------------------
    # graph construction

    def _build_teacher_graph(self):
        g = Graph()
        arch = g.param("arch", (self.teacher.n_edges, self.teacher.n_candidates))
        w = {n: g.param(n) for n in self._t_names}
        x = g.input("x", (None, self.teacher.feature_dim))
        y = g.input("y", (None, self.teacher.n_classes))
        logits, _ = teacher_logits(g, self.teacher, arch, w, x)
        probs = g.softmax(logits)
        loss = g.soft_cross_entropy(probs, y)
        self._tg = g
        self._tg_probs = probs
        self._tg_loss = loss
        self._tg_gw = g.grad_nodes(loss, self._t_names)
        self._tg_ga = g.grad_nodes(loss, ("arch",))["arch"]

    def _build_student_graph(self):
        g = Graph()
        w = {n: g.param(n) for n in self._s_names}
        xs = g.input("xs", (None, self.student.feature_dim))
        ys = g.input("ys", (None, self.student.n_classes))
        xu = g.input("xu", (None, self.student.feature_dim))
        pl = g.input("pl", (None, self.student.n_classes))
        sup = g.soft_cross_entropy(g.softmax(student_logits(g, self.student, w, xs)), ys)
        pseudo = g.soft_cross_entropy(g.softmax(student_logits(g, self.student, w, xu)), pl)
        lam = self.cfg.lam
        self._sg = g
        self._sg_sup = sup
        self._sg_pseudo = pseudo
        self._sg_os_full = g.add(sup, g.smul(pseudo, lam))
        self._sg_os_pl_only = g.smul(pseudo, lam)
        self._sg_gw_sup = g.grad_nodes(sup, self._s_names)
        self._sg_gw_full = g.grad_nodes(self._sg_os_full, self._s_names)
        self._sg_gw_pl_only = g.grad_nodes(self._sg_os_pl_only, self._s_names)

    def _build_chain_graph(self):
        """Pseudo loss L(S, D_pl(T')) with gradients w.r.t. the teacher
        weights.  The architecture enters as a plain input, so it is held
        constant under differentiation."""
        g = Graph()
        tw = {n: g.param(n) for n in self._t_names}
        sw = {n: g.param(n) for n in self._s_names}
        arch_pl = g.input("arch_pl", (self.teacher.n_edges, self.teacher.n_candidates))
        xu = g.input("xu", (None, self.teacher.feature_dim))
        t_logits, _ = teacher_logits(g, self.teacher, arch_pl, tw, xu)
        pl = g.softmax(t_logits)
        s_probs = g.softmax(student_logits(g, self.student, sw, xu))
        loss = g.soft_cross_entropy(s_probs, pl)
        self._cg = g
        self._cg_loss = loss
        self._cg_gt = g.grad_nodes(loss, self._t_names)

    def _ensure_composite(self):
        if self._composite is not None:
            return self._composite
        cfg = self.cfg
        tspec, sspec = self.teacher, self.student
        use_pl = cfg.lam > 0 and len(self._xu) > 0
        g = Graph()
        arch = g.param("arch", (tspec.n_edges, tspec.n_candidates))
        tw = {n: g.param(n) for n in self._t_names}
        xt_tr = g.input("xt_tr")
        yt_tr = g.input("yt_tr")
        xt_val = g.input("xt_val")
        yt_val = g.input("yt_val")

        tr_logits, _ = teacher_logits(g, tspec, arch, tw, xt_tr)
        l_tr = g.soft_cross_entropy(g.softmax(tr_logits), yt_tr)
        gt = g.grad_nodes(l_tr, self._t_names)
        tp = {n: g.add(tw[n], g.smul(gt[n], -cfg.xi_t)) for n in self._t_names}
        tv_logits, _ = teacher_logits(g, tspec, arch, tp, xt_val)
        l_tval = g.soft_cross_entropy(g.softmax(tv_logits), yt_val)

        l_sval = sup = pseudo = o_s = pl = None
        if cfg.objective != "bilevel":
            sw = {n: g.param(n) for n in self._s_names}
            xs_tr = g.input("xs_tr")
            ys_tr = g.input("ys_tr")
            xs_val = g.input("xs_val")
            ys_val = g.input("ys_val")
            sup = g.soft_cross_entropy(
                g.softmax(student_logits(g, sspec, sw, xs_tr)), ys_tr)
            if use_pl:
                xu = g.input("xu")
                arch_pl = g.input("arch_pl")
                plu_logits, _ = teacher_logits(g, tspec, arch_pl, tp, xu)
                pl = g.softmax(plu_logits)
                s_pl = g.softmax(student_logits(g, sspec, sw, xu))
                pseudo = g.soft_cross_entropy(s_pl, pl)
                if cfg.objective == "ablation2":
                    o_s = g.smul(pseudo, cfg.lam)
                else:
                    o_s = g.add(sup, g.smul(pseudo, cfg.lam))
            else:
                o_s = g.smul(sup, 0.0) if cfg.objective == "ablation2" else sup
            gs = g.grad_nodes(o_s, self._s_names)
            sp = {n: g.add(sw[n], g.smul(gs[n], -cfg.xi_s)) for n in self._s_names}
            l_sval = g.soft_cross_entropy(
                g.softmax(student_logits(g, sspec, sp, xs_val)), ys_val)

        if cfg.objective == "bilevel":
            o_v = l_tval
        elif cfg.objective == "ablation1":
            o_v = g.smul(l_sval, cfg.gamma)
        else:
            o_v = g.add(l_tval, g.smul(l_sval, cfg.gamma))
        hyper = g.grad_nodes(o_v, ("arch",))["arch"]
        self._composite = {
            "graph": g, "hyper": hyper, "o_v": o_v, "l_tval": l_tval,
            "l_sval": l_sval, "o_s": o_s, "sup": sup, "pseudo": pseudo,
            "pl": pl, "use_pl": use_pl,
        }
        return self._composite

    # ------------------------------------------------------------------
    # bindings

    def _t_bindings(self, arch_scalars, weights, x, y1h=None):
        b = weights.as_dict() if isinstance(weights, WeightSet) else dict(weights)
        b["arch"] = arch_scalars
        b["x"] = x
        if y1h is not None:
            b["y"] = y1h
        return b

    def split(self, name: str):
        return self._splits[name]

    # ------------------------------------------------------------------
    # stage operations

    def teacher_loss(self, arch: ArchParams, weights: WeightSet,
                     split: str = "teacher_train", batch=None) -> float:
        x, y = batch if batch is not None else self._splits[split]
        out = self._tg.eval([self._tg_loss],
                            self._t_bindings(arch.scalars, weights, x, y))
        return float(out[0])

    def teacher_grads(self, arch: ArchParams, weights: WeightSet, batch=None,
                      want_arch: bool = False, split: str = "teacher_train"):
        """Loss and gradients of the teacher loss in one evaluation."""
        x, y = batch if batch is not None else self._splits[split]
        nodes = [self._tg_loss] + [self._tg_gw[n] for n in self._t_names]
        if want_arch:
            nodes.append(self._tg_ga)
        out = self._tg.eval(nodes, self._t_bindings(arch.scalars, weights, x, y))
        loss = float(out[0])
        gw = WeightSet(dict(zip(self._t_names, out[1:1 + len(self._t_names)])))
        ga = out[-1] if want_arch else None
        return loss, gw, ga

    def teacher_arch_grad(self, arch_scalars: np.ndarray, weights: WeightSet,
                          batch=None) -> np.ndarray:
        x, y = batch if batch is not None else self._splits["teacher_train"]
        out = self._tg.eval([self._tg_ga],
                            self._t_bindings(arch_scalars, weights, x, y))
        return out[0]

    def teacher_virtual_step(self, arch: ArchParams, weights: WeightSet,
                             xi_t: float | None = None, batch=None):
        """T' = T - xi_t * grad; the incoming weights are not modified."""
        xi = self.cfg.xi_t if xi_t is None else xi_t
        loss, gw, _ = self.teacher_grads(arch, weights, batch)
        return weights.axpy(-xi, gw), gw, loss

    def pseudo_label(self, arch: ArchParams, weights: WeightSet,
                     xu: np.ndarray | None = None) -> np.ndarray:
        """Teacher softmax predictions on the unlabeled pool (soft labels)."""
        x = self._xu if xu is None else xu
        if len(x) == 0:
            return self._empty_pl
        out = self._tg.eval([self._tg_probs],
                            self._t_bindings(arch.scalars, weights, x))
        return out[0]

    def student_objective(self, weights: WeightSet, pl: np.ndarray,
                          batch_s=None, xu: np.ndarray | None = None):
        """O_s value, its two components, and its student-weight gradient.

        In ablation2 mode the human-label term is dropped (its recorded
        component is exactly 0).  An empty pseudo set contributes exactly 0.
        """
        xs, ys = batch_s if batch_s is not None else self._splits["student_train"]
        xu = self._xu if xu is None else xu
        ablation2 = self.cfg.objective == "ablation2"
        have_pl = self.cfg.lam > 0 and len(pl) > 0
        bindings = {**weights.as_dict(), "xs": xs, "ys": ys, "xu": xu, "pl": pl}
        if have_pl:
            loss_node = self._sg_os_pl_only if ablation2 else self._sg_os_full
            grads = self._sg_gw_pl_only if ablation2 else self._sg_gw_full
            nodes = [loss_node, self._sg_sup, self._sg_pseudo]
            nodes += [grads[n] for n in self._s_names]
            out = self._sg.eval(nodes, bindings)
            o_s = float(out[0])
            train_comp = 0.0 if ablation2 else float(out[1])
            pseudo_comp = float(out[2])
            gw = WeightSet(dict(zip(self._s_names, out[3:])))
            return o_s, train_comp, pseudo_comp, gw
        if ablation2:
            # nothing to train on: zero objective, zero gradient
            zeros = WeightSet({n: np.zeros_like(weights[n]) for n in self._s_names})
            return 0.0, 0.0, 0.0, zeros
        nodes = [self._sg_sup] + [self._sg_gw_sup[n] for n in self._s_names]
        out = self._sg.eval(nodes, bindings)
        train_comp = float(out[0])
        gw = WeightSet(dict(zip(self._s_names, out[1:])))
        return train_comp, train_comp, 0.0, gw

    def student_virtual_step(self, weights: WeightSet, grad: WeightSet,
                             xi_s: float | None = None) -> WeightSet:
        xi = self.cfg.xi_s if xi_s is None else xi_s
        return weights.axpy(-xi, grad)

    def student_loss_and_grad(self, weights: WeightSet, batch):
        """Plain supervised student loss and gradient (validation term)."""
        x, y = batch
        bindings = {**weights.as_dict(), "xs": x, "ys": y,
                    "xu": x[:0], "pl": y[:0]}
        nodes = [self._sg_sup] + [self._sg_gw_sup[n] for n in self._s_names]
        out = self._sg.eval(nodes, bindings)
        return float(out[0]), WeightSet(dict(zip(self._s_names, out[1:])))

    def student_val_loss(self, weights: WeightSet, batch=None) -> float:
        x, y = batch if batch is not None else self._splits["student_val"]
        bindings = {**weights.as_dict(), "xs": x, "ys": y,
                    "xu": x[:0], "pl": y[:0]}
        return float(self._sg.eval([self._sg_sup], bindings)[0])

    # ------------------------------------------------------------------
    # architecture hypergradients (finite-difference mode)

    def _hvp_arch_teacher_train(self, arch: ArchParams, weights: WeightSet,
                                vec: WeightSet, batch=None) -> np.ndarray:
        """[d2 L_tr / dA dT] . vec by symmetric differences around T."""
        norm = vec.norm()
        if norm == 0.0:
            return np.zeros_like(arch.scalars)
        alpha = self.cfg.c_fd / norm
        g_plus = self.teacher_arch_grad(arch.scalars, weights.axpy(+alpha, vec), batch)
        g_minus = self.teacher_arch_grad(arch.scalars, weights.axpy(-alpha, vec), batch)
        return (g_plus - g_minus) / (2.0 * alpha)

    def teacher_val_terms(self, arch: ArchParams, t_virtual: WeightSet,
                          batch=None, want_grads: bool = True):
        """Validation loss at (T', A) with its weight and direct-arch grads."""
        x, y = batch if batch is not None else self._splits["teacher_val"]
        bindings = self._t_bindings(arch.scalars, t_virtual, x, y)
        if not want_grads:
            out = self._tg.eval([self._tg_loss], bindings)
            return float(out[0]), None, None
        nodes = [self._tg_loss] + [self._tg_gw[n] for n in self._t_names]
        nodes.append(self._tg_ga)
        out = self._tg.eval(nodes, bindings)
        loss = float(out[0])
        v = WeightSet(dict(zip(self._t_names, out[1:1 + len(self._t_names)])))
        return loss, v, out[-1]

    def grad_arch_teacher_val(self, arch: ArchParams, weights: WeightSet,
                              t_virtual: WeightSet, batch_val=None,
                              batch_tr=None):
        """Gradient of L(T', A, val) over A: the direct partial minus xi_t
        times the finite-difference Hessian-vector term.

        When the validation gradient w.r.t. T' vanishes the second term is
        exactly zero in the limit, so only the direct partial is returned.
        """
        loss, v, direct = self.teacher_val_terms(arch, t_virtual, batch_val)
        if self.cfg.xi_t == 0.0 or v.norm() == 0.0:
            return direct, loss
        hvp = self._hvp_arch_teacher_train(arch, weights, v, batch_tr)
        return direct - self.cfg.xi_t * hvp, loss

    def _chain_grad_teacher(self, s_weights: WeightSet, t_virtual: WeightSet,
                            arch: ArchParams, xu: np.ndarray) -> WeightSet:
        """Gradient of the pseudo loss w.r.t. the virtual teacher weights."""
        bindings = {**s_weights.as_dict(), **t_virtual.as_dict(),
                    "arch_pl": arch.scalars, "xu": xu}
        out = self._cg.eval([self._cg_gt[n] for n in self._t_names], bindings)
        return WeightSet(dict(zip(self._t_names, out)))

    def grad_arch_student_val(self, arch: ArchParams, weights_t: WeightSet,
                              weights_s: WeightSet, t_virtual: WeightSet,
                              s_virtual: WeightSet, batch_sval=None,
                              batch_tr=None, xu: np.ndarray | None = None):
        """Student-path architecture gradient
        xi_s * xi_t * lam * [d2 L_tr/dA dT] [d2 L_pl/dT' dS] grad L(S', val),
        both Hessian-vector products by symmetric differences with step
        alpha = c_fd / ||carried vector||.

        Returns the exact zero vector when lam, xi_s, or xi_t is zero, or
        when either carried vector vanishes.  The second return value is the
        student validation loss at S'.
        """
        cfg = self.cfg
        zeros = np.zeros_like(arch.scalars)
        xu = self._xu if xu is None else xu
        if cfg.lam == 0.0 or cfg.xi_s == 0.0 or cfg.xi_t == 0.0 or len(xu) == 0:
            return zeros, self.student_val_loss(s_virtual, batch_sval)
        x, y = batch_sval if batch_sval is not None else self._splits["student_val"]
        sval, v = self.student_loss_and_grad(s_virtual, (x, y))
        v_norm = v.norm()
        if v_norm == 0.0:
            return zeros, sval
        alpha1 = cfg.c_fd / v_norm
        g_plus = self._chain_grad_teacher(weights_s.axpy(+alpha1, v), t_virtual, arch, xu)
        g_minus = self._chain_grad_teacher(weights_s.axpy(-alpha1, v), t_virtual, arch, xu)
        u = WeightSet({n: (g_plus[n] - g_minus[n]) / (2.0 * alpha1)
                       for n in self._t_names})
        if u.norm() == 0.0:
            return zeros, sval
        hvp = self._hvp_arch_teacher_train(arch, weights_t, u, batch_tr)
        return cfg.xi_s * cfg.xi_t * cfg.lam * hvp, sval

    def arch_step(self, arch: ArchParams, grad: np.ndarray,
                  eta: float | None = None,
                  momentum_buf: np.ndarray | None = None):
        """Plain gradient-descent update of the scalars (optional momentum)."""
        eta = self.cfg.eta if eta is None else eta
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite architecture gradient")
        if self.cfg.arch_momentum > 0.0 and momentum_buf is not None:
            momentum_buf *= self.cfg.arch_momentum
            momentum_buf += grad
            step = momentum_buf
        else:
            step = grad
        return arch.with_scalars(arch.scalars - eta * step), momentum_buf

    # ------------------------------------------------------------------
    # exact-unrolled mode and the composite objective

    def _composite_bindings(self, arch_scalars, t_weights, s_weights,
                            arch_pl=None):
        comp = self._ensure_composite()
        b = {"arch": arch_scalars, **t_weights.as_dict()}
        xt, yt = self._splits["teacher_train"]
        xv, yv = self._splits["teacher_val"]
        b.update(xt_tr=xt, yt_tr=yt, xt_val=xv, yt_val=yv)
        if self.cfg.objective != "bilevel":
            b.update(s_weights.as_dict())
            xs, ys = self._splits["student_train"]
            xsv, ysv = self._splits["student_val"]
            b.update(xs_tr=xs, ys_tr=ys, xs_val=xsv, ys_val=ysv)
            if comp["use_pl"]:
                b["xu"] = self._xu
                b["arch_pl"] = arch_scalars if arch_pl is None else arch_pl
        return b

    def unrolled_arch_grad(self, arch: ArchParams, t_weights: WeightSet,
                           s_weights: WeightSet) -> np.ndarray:
        """Exact gradient of the unrolled validation objective over A."""
        comp = self._ensure_composite()
        b = self._composite_bindings(arch.scalars, t_weights, s_weights)
        return comp["graph"].eval([comp["hyper"]], b)[0]

    def _unrolled_step_terms(self, arch, t_weights, s_weights):
        """Hypergradient plus every trace quantity, in one evaluation."""
        comp = self._ensure_composite()
        b = self._composite_bindings(arch.scalars, t_weights, s_weights)
        names = ["hyper", "l_tval"]
        nodes = [comp["hyper"], comp["l_tval"]]
        for key in ("l_sval", "o_s", "sup", "pseudo", "pl"):
            if comp[key] is not None:
                names.append(key)
                nodes.append(comp[key])
        out = dict(zip(names, comp["graph"].eval(nodes, b)))
        ablation2 = self.cfg.objective == "ablation2"
        return {
            "hyper": out["hyper"],
            "o_v_teacher": float(out["l_tval"]),
            "o_v_student": float(out["l_sval"]) if "l_sval" in out else 0.0,
            "o_s": float(out["o_s"]) if "o_s" in out else 0.0,
            "o_s_train": 0.0 if ablation2 else
                         (float(out["sup"]) if "sup" in out else 0.0),
            "o_s_pseudo": float(out["pseudo"]) if "pseudo" in out else 0.0,
            "pl_dev": _rowsum_dev(out["pl"]) if "pl" in out else 0.0,
        }

    def composite_objective(self, t_weights: WeightSet, s_weights: WeightSet,
                            arch_base: ArchParams) -> Callable[[np.ndarray], float]:
        """The unrolled validation objective as a pure numeric function of
        the architecture scalars, for coordinate-wise finite differencing.

        Pseudo-labels use the frozen base scalars for their forward-pass
        mixing weights, matching the dependence structure the hypergradient
        formulas differentiate.
        """
        cfg = self.cfg
        base = arch_base.with_scalars(arch_base.scalars.copy())

        def objective(a: np.ndarray) -> float:
            arch = base.with_scalars(
                np.asarray(a, dtype=np.float64).reshape(base.scalars.shape))
            t_virtual, _, _ = self.teacher_virtual_step(arch, t_weights)
            o_v_teacher = self.teacher_loss(arch, t_virtual, "teacher_val")
            if cfg.objective == "bilevel":
                return o_v_teacher
            pl = self.pseudo_label(base, t_virtual)
            _, _, _, g_s = self.student_objective(s_weights, pl)
            s_virtual = self.student_virtual_step(s_weights, g_s)
            o_v_student = self.student_val_loss(s_virtual)
            if cfg.objective == "ablation1":
                return cfg.gamma * o_v_student
            return o_v_teacher + cfg.gamma * o_v_student

        return objective

    # ------------------------------------------------------------------
    # evaluation helpers

    def evaluate_teacher(self, arch: ArchParams, weights: WeightSet,
                         dataset: LabeledSet) -> float:
        return evaluate_classifier(
            lambda x: teacher_forward(self.teacher, arch, weights, x), dataset)

    def evaluate_student(self, weights: WeightSet, dataset: LabeledSet) -> float:
        return evaluate_classifier(
            lambda x: student_forward(self.student, weights, x), dataset)

    # ------------------------------------------------------------------
    # the search loop

    def _guard(self, name: str, value: float, iteration: int):
        if not math.isfinite(value) or abs(value) > self.cfg.divergence_limit:
            raise DivergenceError(
                f"iteration {iteration}: {name} = {value!r} exceeds the "
                f"divergence limit {self.cfg.divergence_limit:g}")

    def _make_samplers(self, rng: np.random.Generator):
        """Independent mini-batch draws per stage use; full splits if bs=0."""
        bs = self.cfg.batch_size

        def draw(split: str):
            x, y = self._splits[split]
            if bs <= 0 or bs >= len(x):
                return x, y
            idx = rng.choice(len(x), size=bs, replace=False)
            return x[idx], y[idx]

        def draw_u():
            if bs <= 0 or bs >= len(self._xu):
                return self._xu
            idx = rng.choice(len(self._xu), size=bs, replace=False)
            return self._xu[idx]

        return draw, draw_u

    def _fd_stage3(self, arch, t_weights, s_weights, draw, draw_u):
        """Finite-difference-mode stage 3: virtual steps, both architecture
        gradient terms, and the trace quantities."""
        cfg = self.cfg
        bilevel = cfg.objective == "bilevel"
        batch_t3 = draw("teacher_train")
        batch_tv = draw("teacher_val")
        t_virtual, _, _ = self.teacher_virtual_step(arch, t_weights, batch=batch_t3)

        o_s = o_s_train = o_s_pseudo = 0.0
        o_v_student = 0.0
        pl_dev = 0.0
        g_a_student = None
        if not bilevel:
            xu3 = draw_u()
            if cfg.lam > 0 and len(xu3) > 0:
                pl_v = self.pseudo_label(arch, t_virtual, xu3)
                pl_dev = _rowsum_dev(pl_v)
            else:
                pl_v, xu3 = self._empty_pl, self._xu[:0]
            batch_s3 = draw("student_train")
            o_s, o_s_train, o_s_pseudo, g_s_v = self.student_objective(
                s_weights, pl_v, batch_s3, xu3)
            s_virtual = self.student_virtual_step(s_weights, g_s_v)
            batch_sv = draw("student_val")
            if cfg.gamma != 0.0 or cfg.objective == "ablation1":
                g_a_student, o_v_student = self.grad_arch_student_val(
                    arch, t_weights, s_weights, t_virtual, s_virtual,
                    batch_sv, batch_t3, xu3)
            else:
                o_v_student = self.student_val_loss(s_virtual, batch_sv)

        if cfg.objective == "ablation1":
            o_v_teacher, _, _ = self.teacher_val_terms(arch, t_virtual,
                                                       batch_tv, want_grads=False)
            combined = cfg.gamma * g_a_student
        else:
            g_a_teacher, o_v_teacher = self.grad_arch_teacher_val(
                arch, t_weights, t_virtual, batch_tv, batch_t3)
            combined = g_a_teacher.copy()
            if not bilevel and cfg.gamma != 0.0 and g_a_student is not None:
                combined += cfg.gamma * g_a_student

        return {"hyper": combined, "o_v_teacher": o_v_teacher,
                "o_v_student": o_v_student, "o_s": o_s,
                "o_s_train": o_s_train, "o_s_pseudo": o_s_pseudo,
                "pl_dev": pl_dev}

    def run(self, record_arch_history: bool = False) -> SearchResult:
        cfg = self.cfg
        arch = init_arch(self.teacher, cfg.seed)
        t_weights = init_weights(self.teacher, cfg.seed)
        s_weights = init_weights(self.student, cfg.seed + _SEED_STRIDE)
        rng = np.random.default_rng(cfg.seed + 2 * _SEED_STRIDE)
        draw, draw_u = self._make_samplers(rng)

        n_train = len(self._splits["teacher_train"][0])
        iters_per_epoch = 1 if cfg.batch_size <= 0 else \
            max(1, math.ceil(n_train / cfg.batch_size))
        momentum_buf = np.zeros_like(arch.scalars) if cfg.arch_momentum > 0 else None

        traces: list[StepTrace] = []
        history = [arch.scalars.copy()] if record_arch_history else None
        max_pl_dev = 0.0
        bilevel = cfg.objective == "bilevel"
        exact = cfg.hypergrad_mode == "exact_unrolled"
        iteration = 0

        for _ in range(cfg.epochs):
            for _ in range(iters_per_epoch):
                t0 = time.perf_counter()
                try:
                    # stage 1: commit the teacher step
                    batch_t1 = draw("teacher_train")
                    loss_tr, g_t, _ = self.teacher_grads(arch, t_weights, batch_t1)
                    self._guard("teacher train loss", loss_tr, iteration)
                    t_weights = t_weights.axpy(-cfg.commit_lr_t, g_t)
                    norm_t = g_t.norm()

                    # stage 2: pseudo-label with the current teacher, commit
                    # the student step
                    norm_s = 0.0
                    if not bilevel:
                        xu2 = draw_u()
                        if cfg.lam > 0 and len(xu2) > 0:
                            pl2 = self.pseudo_label(arch, t_weights, xu2)
                            max_pl_dev = max(max_pl_dev, _rowsum_dev(pl2))
                        else:
                            pl2, xu2 = self._empty_pl, self._xu[:0]
                        batch_s2 = draw("student_train")
                        o_s2, _, _, g_s = self.student_objective(
                            s_weights, pl2, batch_s2, xu2)
                        self._guard("student objective", o_s2, iteration)
                        s_weights = s_weights.axpy(-cfg.commit_lr_s, g_s)
                        norm_s = g_s.norm()

                    # stage 3: fresh virtual steps, architecture update
                    if exact:
                        terms = self._unrolled_step_terms(arch, t_weights, s_weights)
                    else:
                        terms = self._fd_stage3(arch, t_weights, s_weights,
                                                draw, draw_u)
                    max_pl_dev = max(max_pl_dev, terms["pl_dev"])
                    o_v = terms["o_v_teacher"] + cfg.gamma * terms["o_v_student"]
                    self._guard("validation objective", o_v, iteration)
                    self._guard("student objective", terms["o_s"], iteration)
                    arch, momentum_buf = self.arch_step(
                        arch, terms["hyper"], momentum_buf=momentum_buf)
                except NonFiniteError as exc:
                    raise DivergenceError(f"iteration {iteration}: {exc}") from exc

                traces.append(StepTrace(
                    iteration=iteration,
                    teacher_train_loss=loss_tr,
                    o_s=terms["o_s"], o_s_train=terms["o_s_train"],
                    o_s_pseudo=terms["o_s_pseudo"],
                    o_v=o_v, o_v_teacher=terms["o_v_teacher"],
                    o_v_student=terms["o_v_student"],
                    grad_norm_t=norm_t, grad_norm_s=norm_s,
                    grad_norm_a=float(np.linalg.norm(terms["hyper"])),
                    lam=cfg.lam, gamma=cfg.gamma,
                    wall_time_s=time.perf_counter() - t0,
                ))
                if history is not None:
                    history.append(arch.scalars.copy())
                iteration += 1

        return SearchResult(
            arch=arch,
            genotype=derive_genotype(arch, self.teacher.n_nodes, self.teacher.n_cells),
            traces=traces,
            teacher_weights=t_weights,
            student_weights=s_weights,
            arch_history=history,
            max_pseudo_rowsum_dev=max_pl_dev,
        )


# ----------------------------------------------------------------------
# discrete-architecture retraining (the evaluation protocol)


def retrain_genotype(teacher: TeacherSpec, genotype: Genotype,
                     bundle: DataBundle, epochs: int = 300, lr: float = 0.1,
                     seed: int = 0, divergence_limit: float = 1e6):
    """Train the derived discrete network from scratch on the combined
    teacher train+val data and report its test error."""
    from .nets import discrete_logits, init_discrete_weights

    weights = init_discrete_weights(teacher, genotype, seed)
    g = Graph()
    w_nodes = {n: g.param(n) for n in weights.names()}
    x = g.input("x", (None, teacher.feature_dim))
    y = g.input("y", (None, teacher.n_classes))
    logits = discrete_logits(g, teacher, genotype, w_nodes, x)
    loss = g.soft_cross_entropy(g.softmax(logits), y)
    grads = g.grad_nodes(loss, weights.names())

    x_tr = np.concatenate([bundle.teacher_train.x, bundle.teacher_val.x])
    y_tr = np.concatenate([bundle.teacher_train.y, bundle.teacher_val.y])
    y1h = one_hot(y_tr, teacher.n_classes)
    names = weights.names()
    for it in range(epochs):
        bindings = {**weights.as_dict(), "x": x_tr, "y": y1h}
        out = g.eval([loss] + [grads[n] for n in names], bindings)
        if not math.isfinite(out[0]) or abs(float(out[0])) > divergence_limit:
            raise DivergenceError(f"retraining diverged at iteration {it}")
        weights = weights.axpy(-lr, WeightSet(dict(zip(names, out[1:]))))

    def forward(xq):
        return g.eval([logits], {**weights.as_dict(), "x": np.atleast_2d(xq),
                                 "y": y1h[:1]})[0]

    error = evaluate_classifier(forward, bundle.test)
    return error, weights


# ----------------------------------------------------------------------
# module-level operation surface


def pseudo_label(teacher: TeacherSpec, arch: ArchParams, weights: WeightSet,
                 xu: np.ndarray) -> PseudoLabeledSet:
    """Pseudo-labeled set: inputs paired with teacher softmax predictions."""
    xu = np.asarray(xu, dtype=np.float64)
    if len(xu) == 0:
        return PseudoLabeledSet(xu.reshape(0, teacher.feature_dim),
                                np.zeros((0, teacher.n_classes)))
    logits = teacher_forward(teacher, arch, weights, xu)
    return PseudoLabeledSet(xu, softmax_array(logits))


def default_specs(bundle: DataBundle, hidden_dim: int = 8, n_nodes: int = 4,
                  n_cells: int = 1, student_capacity: str = "small",
                  candidates: tuple[str, ...] | None = None):
    from .nets import CANDIDATE_OPS
    teacher = TeacherSpec(
        feature_dim=bundle.feature_dim, n_classes=bundle.n_classes,
        hidden_dim=hidden_dim, n_nodes=n_nodes, n_cells=n_cells,
        candidates=candidates or CANDIDATE_OPS)
    student = student_spec(student_capacity, bundle.feature_dim, bundle.n_classes)
    return teacher, student


def run_search(config: SearchConfig, bundle: DataBundle,
               teacher: TeacherSpec | None = None,
               student: StudentSpec | None = None,
               record_arch_history: bool = False) -> SearchResult:
    """Build an engine for the bundle and run the full search loop."""
    if teacher is None or student is None:
        default_t, default_s = default_specs(bundle)
        teacher = teacher or default_t
        student = student or default_s
    if config.lam > 0 and len(bundle.unlabeled) == 0 and \
            config.objective != "bilevel":
        raise ValueError("unlabeled pool may be empty only when lam = 0")
    engine = Engine(teacher, student, bundle, config)
    return engine.run(record_arch_history=record_arch_history)
