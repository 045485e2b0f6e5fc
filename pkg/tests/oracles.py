"""Independent reference implementations used to check the real code paths.

Everything here is pure python + math, written from the definitions, with no
imports from the package's numerical code.
"""

import math


def template_values_oracle(n, center, tau, beta):
    """Clamped-linear template by direct evaluation; center=None is negative."""
    if center is None:
        return [[-tau] * n for _ in range(n)]
    r0, c0 = center
    return [
        [
            tau * max(1.0 - beta * (abs(i - r0) + abs(j - c0)) / n, -1.0)
            for j in range(n)
        ]
        for i in range(n)
    ]


def mi_filter_loss_oracle(
    maps, labels, target_category, n, tau, beta, positive_mass, temperature
):
    """Brute-force minus mutual information, enumerated from the definition.

    maps: list of B maps, each a list of n rows of n floats. Images whose
    label differs from the target category score through the negative
    template under every candidate.
    """
    centers = [(r, c) for r in range(n) for c in range(n)]
    templates = [template_values_oracle(n, ctr, tau, beta) for ctr in centers]
    templates.append(template_values_oracle(n, None, tau, beta))
    num_t = len(templates)
    prior = [positive_mass / (n * n)] * (n * n) + [1.0 - positive_mass]

    def inner(m, t):
        return sum(m[i][j] * t[i][j] for i in range(n) for j in range(n))

    negative = templates[-1]
    b_count = len(maps)
    scores = []
    for b in range(b_count):
        on_target = labels[b] == target_category
        row = []
        for t in templates:
            source = t if on_target else negative
            row.append(inner(maps[b], source) / temperature)
        scores.append(row)

    p_x_given_t = [[0.0] * num_t for _ in range(b_count)]
    for t in range(num_t):
        col = [scores[b][t] for b in range(b_count)]
        peak = max(col)
        exps = [math.exp(v - peak) for v in col]
        z = sum(exps)
        for b in range(b_count):
            p_x_given_t[b][t] = exps[b] / z

    p_x = [
        sum(prior[t] * p_x_given_t[b][t] for t in range(num_t))
        for b in range(b_count)
    ]
    mi = 0.0
    for t in range(num_t):
        for b in range(b_count):
            pxt = p_x_given_t[b][t]
            if pxt > 0.0:
                mi += prior[t] * pxt * math.log(pxt / p_x[b])
    return -mi


def population_std_oracle(values):
    """sqrt(mean((x - mean)^2)), spelled out."""
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def central_difference(fn, x0, h):
    return (fn(x0 + h) - fn(x0 - h)) / (2.0 * h)


def relative_error(a, b):
    denom = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / denom


def matches(a, b, rel=1e-10, abs_floor=1e-14):
    """Relative agreement, with an absolute floor for values at zero."""
    err = abs(a - b)
    return err < rel * max(abs(a), abs(b)) or err < abs_floor
