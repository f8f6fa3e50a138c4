"""Teacher-student architecture search with verified one-step hypergradients.

A teacher network with searchable cell architecture trains itself, teaches a
fixed student through soft pseudo-labels, and refines its architecture from
the validation losses of both models.  Every gradient approximation the loop
uses is checkable against an independent numerical oracle.
"""

from .autodiff import (EPS_LOG, Graph, GraphError, Node, NonFiniteError,
                       as_tensor, soft_cross_entropy, softmax_array)
from .data import (CsvParseError, DataBundle, LabeledSet, TaskSpec,
                   UnlabeledSet, generate, load_csv, save_csv)
from .engine import (DivergenceError, Engine, PseudoLabeledSet, SearchConfig,
                     SearchResult, StepTrace, evaluate_classifier, one_hot,
                     pseudo_label, run_search)
from .nets import (ArchParams, Genotype, StudentSpec, TeacherSpec,
                   derive_genotype, export_genotype, init_arch, init_weights,
                   load_genotype, student_forward, student_spec,
                   teacher_forward)
from .oracle import (GradComparison, compare, fd_hypergradient,
                     run_gradcheck, unrolled_hypergradient)
from .weights import WeightSet

__version__ = "0.1.0"
