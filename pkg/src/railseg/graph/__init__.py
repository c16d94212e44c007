from .model import GraphError, LayerSpec, ModelGraph, Prim, lower, prune, topo_order, validate
from .cost import CostReport, count, ghost_module_cost
from .build import (ABLATIONS, BASELINE, LEVEL_ABLATIONS, OPTIMIZED, VariantConfig, build, build_baseline,
                    build_optimized)
from .execute import (Program, RawOutputs, WeightError, check_weights, collect, execute, init_weights, program,
                      run_program, weight_shapes)
from .io import FormatError, dumps_graph, load_graph, load_weights, loads_graph, save_graph, save_weights
from .fixture import tiny_graph, tiny_model
