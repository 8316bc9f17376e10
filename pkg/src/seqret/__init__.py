"""Returns to sequential bachelor/master careers.

Nested multinomial-logit choice probabilities serve as generated
instruments in a reduced-form outcome regression, with a whole-pipeline
bootstrap, admission-policy counterfactuals and curriculum analytics.
"""
from .core import Career, ChoiceSet, Factor, Interaction, Layout, build_design_matrix, filter_careers, \
    load_individuals, default_layout, standardize_by_group, validate_records
from .exceptions import CollinearityError, ConvergenceError, InputError, SeqretError, StageError
from .mnl import MnlConfig, MnlModel, fit_mnl, marginal_effects_at_means, predict_proba, wald_joint
from .nested import NestedConfig, compose_career_probabilities, fit_nested, fit_stage1, fit_stage2, prepare_sample
from .pipeline import PipelineConfig, estimate
from .returns import credibility_filter, fit_modified_first_stage, fit_ols_treatments, fit_reduced_form, \
    level_translation, rescale_effects
from .bootstrap import bootstrap, pairwise_bootstrap
from .policy import PolicyTransform, decompose_simulation, simulate_policy
from .curriculum import CurriculumMatrix, QuantGrouping, credit_shares, quartile_composition, returns_correlation, \
    symmetric_contrast
from .synthgen import DgpConfig, enumerate_probabilities, generate_population, grid_mle_oracle

__version__ = "0.1.0"
