"""Data-free universal adversarial perturbation toolkit."""

from .adapter import LayerCatalog, ModelAdapter, build_adapter, load_weights
from .crafting import (CraftConfig, CraftResult, Perturbation, craft,
                       load_perturbation, random_baseline)
from .datasets import Corpus, load_corpus, make_synthetic
from .metrics import (MetricReport, MetricSpec, depth_metrics, fooling_rate,
                      gfr, gfr_depth, miou)
from .priors import (AugmentSpec, PriorSource, build_data_prior,
                     build_none_prior, build_range_prior, curate_less_bg)
from .training import VictimSpec, top1_accuracy, train_victim

__version__ = "0.1.0"
