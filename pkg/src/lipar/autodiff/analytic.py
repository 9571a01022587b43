"""Closed-form helpers for convolution stacks."""


def receptive_field(schedule):
    """Side length of the receptive field of a stack of (kernel, stride) layers.

    Folds ``F(i) = (F(i+1) - 1) * stride_i + k_i`` from the deepest layer
    (``F = 1``) back to the input.

    >>> receptive_field([(3, 1), (3, 1)])
    5
    """
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must contain at least one layer")
    f = 1
    for k, s in reversed(schedule):
        if k < 1 or s < 1:
            raise ValueError(f"kernel size and stride must be >= 1, got ({k}, {s})")
        f = (f - 1) * s + k
    return f


def conv_param_count(k, c_in, c_out, groups=1):
    """Weight count of a grouped K x K convolution, bias excluded."""
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"groups={groups} must divide both c_in={c_in} and c_out={c_out}")
    return k * k * (c_in // groups) * (c_out // groups) * groups
