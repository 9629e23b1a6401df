"""Shared builders for randomized test instances (all seeded, all exact-scale)."""

from __future__ import annotations

import math

import numpy as np

from fbsdelta import (
    AdaptedProcess,
    Generator,
    IncrementDistribution,
    LinearCoefficients,
    NonlinearModel,
    ProbabilityTree,
    anchor_coefficients,
    eval_expr,
    parse_expr,
    riccati_matrices,
)


def random_increments(rng: np.random.Generator, k: int, d: int) -> IncrementDistribution:
    """Random valid step: centre and whiten k raw points in R^d (needs k > d)."""
    if k <= d:
        raise ValueError("need more outcomes than dimensions to span R^d")
    while True:
        probs = rng.uniform(0.2, 1.0, size=k)
        probs /= probs.sum()
        raw = rng.uniform(-1.0, 1.0, size=(k, d))
        centred = raw - probs @ raw
        cov = np.einsum("k,ki,kj->ij", probs, centred, centred)
        # reject nearly degenerate draws so the whitening stays well-conditioned
        if np.linalg.eigvalsh(cov).min() > 1e-3:
            break
    points = centred @ np.linalg.inv(np.linalg.cholesky(cov)).T
    return IncrementDistribution(points=points, probs=probs)


def random_tree(
    rng: np.random.Generator,
    horizon: int,
    branch_choices: tuple[int, ...] = (2, 3),
    d: int = 1,
) -> ProbabilityTree:
    steps = []
    for _ in range(horizon):
        k = int(rng.choice(branch_choices))
        if k <= d:
            k = d + 1
        if d == 1 and k == 2 and rng.random() < 0.4:
            steps.append(IncrementDistribution.rademacher())
        elif d == 1 and k == 3 and rng.random() < 0.4:
            steps.append(IncrementDistribution.trinomial(float(rng.uniform(0.1, 0.4))))
        else:
            steps.append(random_increments(rng, k, d))
    return ProbabilityTree(steps)


def rademacher_tree(horizon: int) -> ProbabilityTree:
    return ProbabilityTree([IncrementDistribution.rademacher()] * horizon)


def random_process(
    rng: np.random.Generator,
    tree: ProbabilityTree,
    shape: tuple[int, int],
    t_lo: int,
    t_hi: int,
    scale: float = 1.0,
) -> AdaptedProcess:
    vals = tuple(
        rng.uniform(-scale, scale, size=(tree.node_count(t),) + shape) for t in range(t_lo, t_hi + 1)
    )
    return AdaptedProcess(tree, t_lo, t_hi, vals)


def _round2(v: float) -> str:
    return f"{v:.2f}"


def random_driver_exprs(rng: np.random.Generator, n: int, with_z: bool) -> list[str]:
    """One expression per output component; 1-Lipschitz-ish smooth terms only."""
    nonlin = ["tanh", "sin"]
    exprs = []
    for _ in range(n):
        terms = []
        for j in range(1, n + 1):
            c = rng.uniform(-0.35, 0.35) / n
            fn = nonlin[int(rng.integers(2))]
            terms.append(f"{_round2(c)}*{fn}(y{j})" if rng.random() < 0.7 else f"{_round2(c)}*y{j}")
            if with_z:
                c2 = rng.uniform(-0.35, 0.35) / n
                fn2 = nonlin[int(rng.integers(2))]
                terms.append(f"{_round2(c2)}*{fn2}(z{j})" if rng.random() < 0.7 else f"{_round2(c2)}*z{j}")
        terms.append(_round2(float(rng.uniform(-0.5, 0.5))))
        if rng.random() < 0.3:
            terms.append(f"{_round2(float(rng.uniform(-0.1, 0.1)))}*t")
        exprs.append(" + ".join(terms).replace("+ -", "- "))
    return exprs


def dsl_generator(
    interior: list[str], terminal: list[str], n: int, d: int, horizon: int
) -> Generator:
    """Generator whose z-variables are bound to the first noise column."""
    interior_ast = [parse_expr(s, m=0, n=n) for s in interior]
    terminal_ast = [parse_expr(s, m=0, n=n) for s in terminal]

    def fn(t, y, z, node):
        exprs = terminal_ast if t == horizon else interior_ast
        z_bind = np.asarray(z)[:, 0]
        return np.array([eval_expr(e, t=float(t), y=y, z=z_bind) for e in exprs])

    return Generator(n=n, d=d, fn=fn)


def random_dsl_generator(
    rng: np.random.Generator, n: int, d: int, horizon: int
) -> tuple[Generator, list[str], list[str]]:
    interior = random_driver_exprs(rng, n, with_z=True)
    terminal = random_driver_exprs(rng, n, with_z=False)
    return dsl_generator(interior, terminal, n, d, horizon), interior, terminal


def random_terminal(
    rng: np.random.Generator, tree: ProbabilityTree, n: int, scale: float = 1.0
) -> AdaptedProcess:
    horizon = tree.horizon
    vals = rng.uniform(-scale, scale, size=(tree.node_count(horizon), n, 1))
    return AdaptedProcess(tree, horizon, horizon, (vals,))


def random_offsets(
    rng: np.random.Generator, tree: ProbabilityTree, m: int, n: int, scale: float = 1.0
) -> dict:
    """Fresh inhomogeneous data bundle for a linear system on this tree."""
    T = tree.horizon
    return {
        "D": random_process(rng, tree, (m, 1), 0, T - 1, scale),
        "Dbar": random_process(rng, tree, (m, 1), 0, T - 1, scale),
        "Dhat": random_process(rng, tree, (n, 1), 1, T, scale),
        "g": random_process(rng, tree, (n, 1), T, T, scale),
        "x0": rng.uniform(-scale, scale, size=(m, 1)),
    }


def random_linear_coefficients(
    rng: np.random.Generator,
    tree: ProbabilityTree,
    m: int,
    n: int,
    scale: float = 0.3,
    margin: float = 1e-3,
    with_offsets: bool = True,
) -> LinearCoefficients:
    """Random coefficient bundle, redrawn until every Gamma_t is comfortably
    invertible (smallest singular value above ``margin``)."""
    T = tree.horizon
    for _ in range(200):
        s = scale / max(m, n)
        chat = rng.uniform(-s, s, size=(T, n, n))
        chat[-1] = 0.0
        while True:
            G = rng.uniform(-1.0, 1.0, size=(n, m))
            if np.linalg.svd(G, compute_uv=False)[min(m, n) - 1] > 0.3:
                break
        offsets = random_offsets(rng, tree, m, n) if with_offsets else {}
        coeffs = LinearCoefficients.build(
            tree,
            m,
            n,
            G=G,
            x0=offsets.pop("x0", np.zeros((m, 1))),
            A=rng.uniform(-s, s, size=(T, m, m)),
            Abar=rng.uniform(-s, s, size=(T, m, m)),
            B=rng.uniform(-s, s, size=(T, m, n)),
            Bbar=rng.uniform(-s, s, size=(T, m, n)),
            C=rng.uniform(-s, s, size=(T, m, n)),
            Cbar=rng.uniform(-s, s, size=(T, m, n)),
            Ahat=rng.uniform(-s, s, size=(T, n, m)),
            Bhat=rng.uniform(-s, s, size=(T, n, n)),
            Chat=chat,
            **offsets,
        )
        mats = riccati_matrices(coeffs)
        if mats.failure_t is None and mats.sigma_min.min() > margin:
            return coeffs
    raise RuntimeError("could not draw a comfortably solvable instance")


def make_anchor_model(
    tree: ProbabilityTree,
    G,
    beta1: float,
    beta2: float,
    x0,
    b_const=None,
    s_const=None,
    f_const=None,
    g_const=None,
) -> tuple[NonlinearModel, LinearCoefficients]:
    """Nonlinear model whose equations are exactly the linear base family
    plus constant offsets, paired with those coefficients for comparison."""
    G = np.asarray(G, dtype=float)
    n, m = G.shape
    Gt = G.T

    def col(v, rows):
        return np.zeros((rows, 1)) if v is None else np.asarray(v, dtype=float).reshape(rows, 1)

    bc, sc = col(b_const, m), col(s_const, m)
    fc, gc = col(f_const, n), col(g_const, n)
    model = NonlinearModel(
        m=m,
        n=n,
        G=G,
        beta1=beta1,
        beta2=beta2,
        x0=x0,
        b=lambda t, x, y, z, node: -beta2 * (Gt @ y) + bc,
        sigma=lambda t, x, y, z, node: -beta2 * (Gt @ z) + sc,
        f=lambda t, x, y, z, node: beta1 * (G @ x) + fc,
        h=lambda x, node: G @ x + gc,
    )
    coeffs = anchor_coefficients(tree, G, beta1, beta2, x0, D=bc, Dbar=sc, Dhat=-fc, g=gc)
    return model, coeffs


def mild_coupled_model(
    m: int = 2,
    seed: int = 5,
    eps: float = 0.1,
    shift: float = 0.0,
    x0_bump: float = 0.0,
) -> NonlinearModel:
    """Coupled square model: the monotone base couplings plus smooth bounded
    perturbations small enough to keep part of the dissipativity margin.

    The driver perturbation depends on x only and the forward perturbations on
    (y, z) only, so every per-time inequality — including the boundary layers,
    where only one margin term is available — holds with margins strictly
    between zero and the declared weights.
    """
    rng = np.random.default_rng(seed)
    n = m
    while True:
        G = np.eye(m) + 0.2 * rng.uniform(-1.0, 1.0, size=(m, m))
        if np.linalg.svd(G, compute_uv=False)[-1] > 0.7:
            break
    Gt = G.T

    def unit(rows, cols):
        W = rng.uniform(-1.0, 1.0, size=(rows, cols))
        return W / max(1.0, float(np.linalg.norm(W, 2)))

    Wb = (unit(m, n), unit(m, n))
    Ws = (unit(m, n), unit(m, n))
    Wf = unit(n, m)
    Wh = unit(n, m)
    cb = rng.uniform(-0.5, 0.5, size=(m, 1))
    cs = rng.uniform(-0.5, 0.5, size=(m, 1))
    cf = rng.uniform(-0.5, 0.5, size=(n, 1))
    x0 = rng.uniform(-0.5, 0.5, size=(m, 1)) + x0_bump
    return NonlinearModel(
        m=m,
        n=n,
        G=G,
        beta1=1.0,
        beta2=1.0,
        x0=x0,
        b=lambda t, x, y, z, node: -(Gt @ y) + eps * np.tanh(Wb[0] @ y + Wb[1] @ z + cb) + shift,
        sigma=lambda t, x, y, z, node: -(Gt @ z) + eps * np.tanh(Ws[0] @ y + Ws[1] @ z + cs),
        f=lambda t, x, y, z, node: G @ x + eps * np.tanh(Wf @ x + cf) + shift,
        h=lambda x, node: G @ x + eps * np.tanh(Wh @ x),
    )


def decoupled_model(seed: int = 9) -> NonlinearModel:
    """Forward part independent of (Y, Z): the backward pair then solves a
    plain backward equation along the forward paths."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.1, 0.3, size=6)
    return NonlinearModel(
        m=1,
        n=2,
        G=np.array([[1.0], [0.4]]),
        beta1=1.0,
        beta2=0.0,
        x0=np.array([[0.6]]),
        b=lambda t, x, y, z, node: c[0] * np.tanh(x) + 0.1,
        sigma=lambda t, x, y, z, node: c[1] * np.tanh(0.5 * x) - 0.05,
        f=lambda t, x, y, z, node: np.array(
            [
                [c[2] * math.tanh(y[0, 0]) + c[3] * x[0, 0]],
                [c[4] * math.sin(z[1, 0]) + c[5] * y[1, 0] + 0.1 * t],
            ]
        ),
        h=lambda x, node: np.array([[math.tanh(x[0, 0])], [0.5 * x[0, 0]]]),
    )
