"""Textual auto-differentiation for prompt optimization.

Trace a compound LLM workflow into a parameter graph, propagate natural-language
feedback backward through it, and let an optimizer LLM propose better prompts
under minibatch-then-validation gating.
"""

from .backends import (
    BackendError,
    Backends,
    HTTPBackend,
    ModelRequest,
    ModelResponse,
    ScriptedBackend,
    ScriptEntry,
    UnscriptedRequestError,
    UsageLedger,
)
from .backward import BackwardEngine, accumulate_cyclic, backward_functional, backward_generator, backward_loss, run_backward
from .components import (
    DocumentCorpus,
    EvalScore,
    GeneratorOutput,
    RetrieverOutput,
    combine_lists,
    exact_match,
    f1_score,
    functional_forward,
    generator_forward,
    loss_forward,
    retriever_forward,
)
from .graph import (
    CycleError,
    Gradient,
    GradientContext,
    GraphError,
    Parameter,
    ParameterGraph,
    ParameterKind,
    zero_grad,
)
from .optimizer import FailedProposal, HistoryEntry, Proposal, apply_proposal, parse_proposal, propose, record_outcome, revert
from .pipelines import PIPELINE_IDS, Sample, agent_step, build_pipeline
from .trainer import (
    Checkpoint,
    RunReport,
    StepReport,
    Trainer,
    TrainerConfig,
    load_checkpoint,
    no_error_batch_probability,
    run_training,
    save_checkpoint,
    selective_backward,
    validate,
)

__version__ = "0.1.0"
