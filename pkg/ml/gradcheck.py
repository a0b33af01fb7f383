"""
Gradient Check Matrix

Compares every hand-derived backward pass against central finite differences:

- standalone pooling: GeM for several exponents and a two-group GGeM, wrt the
  input tokens and (when trainable) the exponents
- end to end: every parameter tensor of a freshly initialised toy ViT under
  cross-entropy loss

A tensor passes when relative_error(analytic, numeric) <= tolerance.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ml.pooling import (
    ActivationMaps,
    PoolingConfig,
    avg_pool,
    gem_backward_p,
    gem_backward_x,
    gem_pool,
    ggem_pool,
    gradient_concentration_table,
    pool_backward,
)
from ml.tensor_core import Rng, ensure_finite, finite_diff_grad, relative_error
from ml.toy_vit import ToyViTConfig, ToyViTModel
from utils.console import status


DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5

STANDALONE_EXPONENTS = (1.0, 2.0, 3.0, 5.0, 8.0)
STANDALONE_SHAPE = (16, 8)
STANDALONE_RANGE = (0.1, 10.0)
GGEM_EXPONENTS = (2.0, 5.0)

CONCENTRATION_INPUTS = np.linspace(0.1, 1.0, 10)
CONCENTRATION_EXPONENTS = (1.0, 2.0, 4.0, 8.0)

GRADCHECK_IMAGES = 2

# Scale floor for parameter tensors; the attention key bias has an identically
# zero gradient (softmax is shift invariant), so its error is measured against this
GRADIENT_FLOOR = 1e-5

# Multiplies every analytic gradient when the negative control is requested
CORRUPTION_FACTOR = 1.5


@dataclass
class GradcheckReport:
    tolerance: float
    pooling: List[Dict] = field(default_factory=list)
    parameters: Dict[str, float] = field(default_factory=dict)
    concentration: Optional[np.ndarray] = None

    @property
    def errors(self) -> List[float]:
        values = list(self.parameters.values())
        for row in self.pooling:
            values.extend(v for k, v in row.items() if k.startswith('grad_'))
        return values

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def parameter_groups(self) -> Dict[str, float]:
        """Max error per parameter group (tensor name without its last component)"""
        groups: Dict[str, float] = {}
        for name, error in self.parameters.items():
            group = name.rsplit('.', 1)[0] if '.' in name else name
            groups[group] = max(groups.get(group, 0.0), error)
        return groups

    def to_dict(self) -> Dict:
        data = {
            'tolerance': self.tolerance,
            'passed': self.passed,
            'max_relative_error': self.max_error,
            'pooling': self.pooling,
            'parameters': self.parameters,
            'parameter_groups': self.parameter_groups(),
        }
        if self.concentration is not None:
            data['gradient_concentration'] = {
                'x': CONCENTRATION_INPUTS.tolist(),
                'p': list(CONCENTRATION_EXPONENTS),
                'dv_dx': self.concentration.tolist(),
            }
        return data


def _corrupt(grad: np.ndarray, corrupt: bool) -> np.ndarray:
    return grad * CORRUPTION_FACTOR if corrupt else grad


def check_pooling(rng: Rng, trainable: bool = True, corrupt: bool = False) -> List[Dict]:
    """Standalone pooling backward checks on x in [0.1, 10]"""
    rows = []
    low, high = STANDALONE_RANGE

    x_values = rng.uniform(low, high, STANDALONE_SHAPE)
    grad_out = rng.normal(1.0, STANDALONE_SHAPE[1])
    x = ActivationMaps.from_array(x_values)

    def objective(pooled: np.ndarray) -> float:
        return float(np.dot(grad_out, pooled))

    # average is GeM at p = 1 without the clamp
    analytic, _ = pool_backward(x_values, PoolingConfig.average(), grad_out)
    numeric = finite_diff_grad(lambda t: objective(avg_pool(ActivationMaps.from_array(t))), x_values, FD_STEP)
    rows.append({'check': 'average', 'grad_x': relative_error(_corrupt(analytic, corrupt), numeric)})

    for p in STANDALONE_EXPONENTS:
        v = gem_pool(x, p)
        analytic = ensure_finite(gem_backward_x(x, p, v, grad_out), f"gem p={p} grad_x")
        numeric = finite_diff_grad(lambda t: objective(gem_pool(ActivationMaps.from_array(t), p)), x_values, FD_STEP)
        row = {'check': f'gem p={p:g}', 'grad_x': relative_error(_corrupt(analytic, corrupt), numeric)}

        if trainable:
            cfg = PoolingConfig.gem(p=p)
            analytic_p = ensure_finite(gem_backward_p(x, cfg, v, grad_out), f"gem p={p} grad_p")
            numeric_p = finite_diff_grad(lambda q: objective(gem_pool(x, q[0])), np.array([p]), FD_STEP)
            row['grad_p'] = relative_error(_corrupt(analytic_p, corrupt), numeric_p)
        rows.append(row)

    cfg = PoolingConfig.ggem(groups=len(GGEM_EXPONENTS), p=GGEM_EXPONENTS, trainable=trainable)
    v = ggem_pool(x, cfg)
    analytic, analytic_p = pool_backward(x_values, cfg, grad_out)
    ensure_finite(analytic, "ggem grad_x")
    numeric = finite_diff_grad(lambda t: objective(ggem_pool(ActivationMaps.from_array(t), cfg)), x_values, FD_STEP)
    row = {'check': f"ggem p={','.join(f'{p:g}' for p in GGEM_EXPONENTS)}",
           'grad_x': relative_error(_corrupt(analytic, corrupt), numeric)}
    if trainable:
        ensure_finite(analytic_p, "ggem grad_p")
        numeric_p = finite_diff_grad(lambda q: objective(ggem_pool(x, cfg.with_exponents(q))),
                                     np.array(GGEM_EXPONENTS), FD_STEP)
        row['grad_p'] = relative_error(_corrupt(analytic_p, corrupt), numeric_p)
    rows.append(row)
    return rows


def check_model(config: ToyViTConfig, rng: Rng, corrupt: bool = False,
                verbose: bool = False) -> Dict[str, float]:
    """Per-tensor relative error of the toy ViT backward under cross-entropy"""
    model = ToyViTModel.initialize(config, rng)
    data_rng = rng.spawn(2)
    images = data_rng.uniform(0.0, 1.0, (GRADCHECK_IMAGES, config.image_size, config.image_size, config.channels_in))
    labels = np.arange(GRADCHECK_IMAGES) % config.classes

    _, grads = model.loss_and_grads(images, labels)

    errors = {}
    for name in model.trainable_names():
        analytic = ensure_finite(grads[name], name)
        original = model.params[name]

        def loss_at(values: np.ndarray) -> float:
            model.params[name] = values
            return model.loss(images, labels)

        try:
            numeric = finite_diff_grad(loss_at, original, FD_STEP)
        finally:
            model.params[name] = original

        errors[name] = relative_error(_corrupt(analytic, corrupt), numeric, floor=GRADIENT_FLOOR)
        if verbose:
            status(f"    {name:28s} {errors[name]:.2e}")
    return errors


def run_gradcheck(config: ToyViTConfig, seed: int = 0, corrupt: bool = False,
                  tolerance: float = DEFAULT_TOLERANCE, verbose: bool = False) -> GradcheckReport:
    """
    Full gradient-check matrix

    Exponent gradients are checked only when the config's exponents are
    trainable.

    Raises:
        NumericFailure: an analytic gradient is non-finite (names the tensor)
    """
    rng = Rng(seed)
    trainable = config.pooling.exponents_trainable

    report = GradcheckReport(tolerance=tolerance)
    report.pooling = check_pooling(rng.spawn(0), trainable=trainable, corrupt=corrupt)
    report.parameters = check_model(config, rng.spawn(1), corrupt=corrupt, verbose=verbose)
    report.concentration = gradient_concentration_table(CONCENTRATION_INPUTS, CONCENTRATION_EXPONENTS)
    return report
