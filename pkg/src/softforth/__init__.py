"""softforth: a Forth subset with exact and differentiable execution.

The discrete interpreter gives ground-truth semantics; the continuous
machine runs the same lowered programs on soft (distributional) state,
which makes program sketches with trainable slots end-to-end
differentiable.
"""

from .autodiff import Node, ParamStore, Tape, grad_check
from .compiler import Instr, LoweredProgram, compile_source, compile_tokens
from .errors import (CompileError, ConfigError, ForthError, ParseError,
                     RuntimeFault, ShapeMismatch, StepBudgetExceeded)
from .executor import ExecutionPlan, build_plan, discretize, make_context, rnn_step, run
from .interp import DiscreteState, initial_state, run_discrete, step_discrete
from .lexer import Token, tokenize
from .machine import ContinuousState, MachineDims, OpTensors, ShiftMatrices, apply_word
from .slots import SlotSpec, apply_slot, init_params, parse_slot

__all__ = [
    "CompileError", "ConfigError", "ContinuousState", "DiscreteState",
    "ExecutionPlan", "ForthError", "Instr", "LoweredProgram", "MachineDims",
    "Node", "OpTensors", "ParamStore", "ParseError", "RuntimeFault",
    "ShapeMismatch", "ShiftMatrices", "SlotSpec", "StepBudgetExceeded",
    "Tape", "Token", "apply_slot", "apply_word", "build_plan",
    "compile_source", "compile_tokens", "discretize", "grad_check",
    "init_params", "initial_state", "make_context", "parse_slot",
    "rnn_step", "run", "run_discrete", "step_discrete", "tokenize",
]
