"""Synthetic economies, worker panels and vacancy texts with known truth."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import rng
from .errors import ConfigurationError
from .estimate import weighted_corr
from .flows import DAYS_PER_PERIOD, NONEMP
from .model import DEFAULT_BETA, EconomyParams, ValueVector, solve_values, stationary_distribution

logger = logging.getLogger(__name__)

EE_GAP_MAX = 31
MAX_REJECTIONS = 1000

# event codes in the simulation log
EE_RELOCATION, EE_VOLUNTARY, EN_EXOGENOUS, EN_VOLUNTARY, NE_HIRE = 1, 2, 3, 4, 5
EVENT_NAMES = {EE_RELOCATION: "ee_relocation", EE_VOLUNTARY: "ee_voluntary", EN_EXOGENOUS: "en_exogenous",
               EN_VOLUNTARY: "en_voluntary", NE_HIRE: "ne"}

# per-worker draw slots
_S_ALPHA, _S_CELL, _S_AGE, _S_INIT, _S_OCC = range(5)
# per-worker-period draw slots
_S_SHOCK, _S_ARRIVE, _S_DEST, _S_G_ORIGIN, _S_G_DEST, _S_GAP, _S_NOISE, _S_START = range(8)


def _pair(x, name):
    lo, hi = (float(v) for v in x)
    if hi < lo:
        raise ConfigurationError(f"{name}: upper bound below lower bound")
    return lo, hi


@dataclass(frozen=True)
class ParamSampler:
    """How :func:`draw_economy` draws employer primitives.

    ``psi`` and ``a`` are uniform on their ranges, linked by a Gaussian
    copula whose correlation is tuned towards ``corr_psi_a``; ``delta`` and
    ``rho`` are uniform; ``f`` is symmetric Dirichlet.
    """

    J: int = 300
    psi_range: tuple = (-0.25, 0.25)
    a_range: tuple = (-0.25, 0.25)
    delta_range: tuple = (0.02, 0.08)
    rho_range: tuple = (0.0, 0.04)
    f_concentration: float = 5.0
    corr_psi_a: float = 0.0
    lambda0: float = 0.7
    lambda1: float = 0.3
    sigma: float = 2.0
    u_N: float = -0.25
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.J < 1:
            raise ConfigurationError("J must be positive")
        for name in ("psi_range", "a_range", "delta_range", "rho_range"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))
        if self.delta_range[0] < 0 or self.rho_range[0] < 0 or self.delta_range[1] + self.rho_range[1] >= 1:
            raise ConfigurationError("delta and rho ranges must be non-negative with delta + rho < 1")
        if self.f_concentration <= 0:
            raise ConfigurationError("f_concentration must be positive")
        if not -1 <= self.corr_psi_a <= 1:
            raise ConfigurationError("corr_psi_a must lie in [-1, 1]")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_workers: int = 50_000
    n_periods: int = 10
    wage_noise_sd: float = 0.05
    worker_effect_sd: float = 0.3
    demographics: dict = field(default_factory=lambda: {
        "F/1": 0.15, "F/2": 0.2, "F/3": 0.15, "M/1": 0.15, "M/2": 0.2, "M/3": 0.15})
    param_sampler: ParamSampler = field(default_factory=ParamSampler)
    year_education_trend: float = 0.01
    age_coefs: tuple = (-4e-4, 5e-6)
    n_industries: int = 8
    n_locations: int = 10
    n_occupations: int = 12

    def __post_init__(self):
        if isinstance(self.param_sampler, dict):
            object.__setattr__(self, "param_sampler", ParamSampler(**self.param_sampler))
        for name in ("n_workers", "n_periods", "n_industries", "n_locations", "n_occupations"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.wage_noise_sd < 0 or self.worker_effect_sd < 0:
            raise ConfigurationError("standard deviations must be non-negative")
        shares = np.array(list(self.demographics.values()), dtype=float)
        if shares.size == 0 or np.any(shares < 0) or abs(shares.sum() - 1) > 1e-9:
            raise ConfigurationError("demographic shares must be non-negative and sum to 1")
        for key in self.demographics:
            if str(key).count("/") != 1:
                raise ConfigurationError(f"demographic cell {key!r} must look like 'gender/education'")

    @property
    def J(self) -> int:
        return self.param_sampler.J


# ---------------------------------------------------------------------------
# economy


def _uniform_from(u, lo_hi):
    lo, hi = lo_hi
    return lo + (hi - lo) * u


def draw_economy(config: SimConfig) -> EconomyParams:
    """Draw employer primitives; ``Corr(psi, a)`` (weighted by ``f``) lands
    within 0.1 of the target or a :class:`ConfigurationError` is raised."""
    from scipy.special import ndtr

    ps = config.param_sampler
    J = ps.J
    gen = np.random.default_rng([int(config.seed) & (2**63 - 1), 0xEC0])
    copula = ps.corr_psi_a
    for attempt in range(MAX_REJECTIONS):
        z1 = gen.standard_normal(J)
        z2 = copula * z1 + np.sqrt(max(1 - copula ** 2, 0.0)) * gen.standard_normal(J)
        psi = _uniform_from(ndtr(z1), ps.psi_range)
        a = _uniform_from(ndtr(z2), ps.a_range)
        delta = _uniform_from(gen.random(J), ps.delta_range)
        rho = _uniform_from(gen.random(J), ps.rho_range)
        f = gen.dirichlet(np.full(J, ps.f_concentration))
        realized = weighted_corr(psi, a, f)
        if abs(realized - ps.corr_psi_a) <= 0.1:
            break
        # steer the copula towards the target
        copula = float(np.clip(copula + 0.5 * (ps.corr_psi_a - realized), -0.999, 0.999))
    else:
        raise ConfigurationError(
            f"could not reach Corr(psi, a) = {ps.corr_psi_a} within 0.1 after {MAX_REJECTIONS} draws"
        )
    logger.debug("draw_economy accepted after %d draws (corr %.3f)", attempt + 1, realized)
    return EconomyParams(psi=psi, a=a, delta=delta, rho=rho, f=f, lambda0=ps.lambda0, lambda1=ps.lambda1,
                         beta=ps.beta, sigma=ps.sigma, u_N=ps.u_N)


def draw_establishments(params: EconomyParams, config: SimConfig) -> pd.DataFrame:
    """Observable employer characteristics: industry, location and main occupation."""
    J = params.J
    ids = np.arange(J)
    s = config.seed
    return pd.DataFrame({
        "establishment_id": ids,
        "industry": rng.integers(s, ids, -2, 0, 0, config.n_industries - 1),
        "location": rng.integers(s, ids, -2, 1, 0, config.n_locations - 1),
        "occupation": [f"{1000 + 100 * (k // 4) + k % 4 + 1}" for k in
                       rng.integers(s, ids, -2, 2, 0, config.n_occupations - 1)],
    })


# ---------------------------------------------------------------------------
# panel


@dataclass
class SimulatedPanel:
    panel: pd.DataFrame
    events: pd.DataFrame
    values: ValueVector
    L0: np.ndarray
    alpha: np.ndarray


def _wage_covariates(age, education, period, config: SimConfig):
    c2, c3 = config.age_coefs
    x = age.astype(float) - 40.0
    return config.year_education_trend * period * education + c2 * x ** 2 + c3 * x ** 3


def simulate_panel(params: EconomyParams, config: SimConfig, establishments: pd.DataFrame | None = None) -> SimulatedPanel:
    """Simulate worker histories period by period.

    Initial states come from the stationary distribution of the employment
    process.  Every random number is a function of ``(seed, worker_id,
    period, slot)``.  Returns the panel (one row per worker-period, NONEMP
    rows for non-employment) and a log of every transition.
    """
    seed = config.seed
    n, T, J = config.n_workers, config.n_periods, params.J
    wid = np.arange(n)
    vals = solve_values(params, params.flow_utility())
    sv = vals.as_scaled(params.sigma)
    v = np.append(sv.V, sv.V_N)  # index J is non-employment
    pi = stationary_distribution(params, vals)
    cdf_f = np.cumsum(params.f)
    cdf_f /= cdf_f[-1]

    cells = list(config.demographics)
    cell = rng.categorical(rng.uniform(seed, wid, -1, _S_CELL), list(config.demographics.values()))
    gender = np.array([c.split("/")[0] for c in cells])[cell]
    education = np.array([int(c.split("/")[1]) for c in cells])[cell]
    age0 = rng.integers(seed, wid, -1, _S_AGE, 20, 60)
    alpha = config.worker_effect_sd * rng.normal(seed, wid, -1, _S_ALPHA)
    occ_codes = (establishments["occupation"].to_numpy() if establishments is not None
                 else np.array([f"{1000 + j % 97}" for j in range(J)]))

    state = np.full((T, n), J, dtype=np.int64)
    state[0] = rng.categorical(rng.uniform(seed, wid, -1, _S_INIT), pi)
    start_day = np.ones((T, n), dtype=np.int64)
    end_day = np.full((T, n), DAYS_PER_PERIOD, dtype=np.int64)
    ev_w, ev_t, ev_k, ev_o, ev_d = [], [], [], [], []

    delta = np.append(params.delta, 0.0)
    rho = np.append(params.rho, 0.0)
    for t in range(T - 1):
        cur = state[t]
        emp = cur < J
        u = rng.uniform(seed, wid, t, _S_SHOCK)
        offer = rng.uniform(seed, wid, t, _S_ARRIVE)
        dest = np.minimum(np.searchsorted(cdf_f, rng.uniform(seed, wid, t, _S_DEST), side="right"), J - 1)
        g_o = rng.gumbel(seed, wid, t, _S_G_ORIGIN)
        g_d = rng.gumbel(seed, wid, t, _S_G_DEST)
        nxt = cur.copy()
        kind = np.zeros(n, dtype=np.int64)

        d_sep = emp & (u < delta[cur])
        d_rel = emp & ~d_sep & (u < delta[cur] + rho[cur])
        searching = emp & ~d_sep & ~d_rel
        got = searching & (offer < params.lambda1)
        no_offer = searching & ~got
        nxt[d_sep] = J
        kind[d_sep] = EN_EXOGENOUS
        nxt[d_rel] = dest[d_rel]
        kind[d_rel & (dest != cur)] = EE_RELOCATION
        take = got & (v[dest] + g_d > v[cur] + g_o)
        nxt[take] = dest[take]
        kind[take & (dest != cur)] = EE_VOLUNTARY
        quit_ = no_offer & (v[J] + g_d > v[cur] + g_o)
        nxt[quit_] = J
        kind[quit_] = EN_VOLUNTARY
        hire = ~emp & (offer < params.lambda0) & (v[dest] + g_d > v[J] + g_o)
        nxt[hire] = dest[hire]
        kind[hire] = NE_HIRE
        state[t + 1] = nxt

        ee = (kind == EE_RELOCATION) | (kind == EE_VOLUNTARY)
        en = (kind == EN_EXOGENOUS) | (kind == EN_VOLUNTARY)
        gap = rng.integers(seed, wid, t, _S_GAP, 0, EE_GAP_MAX)
        start_day[t + 1, ee] = 1 + gap[ee]
        start_day[t + 1, hire] = 1 + gap[hire]
        leave = rng.integers(seed, wid, t, _S_GAP, EE_GAP_MAX + 1, DAYS_PER_PERIOD)
        end_day[t, en] = np.maximum(start_day[t, en], DAYS_PER_PERIOD + 1 - leave[en])
        moved = kind > 0
        ev_w.append(wid[moved])
        ev_t.append(np.full(moved.sum(), t))
        ev_k.append(kind[moved])
        ev_o.append(cur[moved])
        ev_d.append(nxt[moved])

    period = np.repeat(np.arange(T), n)
    st = state.ravel()
    employed = st < J
    age = np.tile(age0, T) + period
    edu = np.tile(education, T)
    noise = config.wage_noise_sd * rng.normal(seed, np.tile(wid, T), period, _S_NOISE)
    psi_ext = np.append(params.psi, 0.0)
    log_wage = psi_ext[st] + np.tile(alpha, T) + _wage_covariates(age, edu, period, config) + noise
    occ = np.where(employed, np.append(occ_codes, "")[st], "")
    panel = pd.DataFrame({
        "worker_id": np.tile(wid, T),
        "period": period,
        "employer_id": np.where(employed, st, NONEMP),
        "log_wage": np.where(employed, log_wage, np.nan),
        "age": age,
        "gender": np.tile(gender, T),
        "education": edu,
        "occupation": occ,
        "spell_start_day": start_day.ravel(),
        "spell_end_day": end_day.ravel(),
    }).sort_values(["worker_id", "period"], kind="mergesort").reset_index(drop=True)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    events = pd.DataFrame({"worker_id": cat(ev_w), "period": cat(ev_t), "kind": cat(ev_k),
                           "origin": cat(ev_o), "destination": cat(ev_d)})
    events["origin"] = np.where(events["origin"] == J, NONEMP, events["origin"])
    events["destination"] = np.where(events["destination"] == J, NONEMP, events["destination"])
    L0 = np.bincount(state[0], minlength=J + 1)
    return SimulatedPanel(panel, events, sv, L0, alpha)


def event_flow_counts(events: pd.DataFrame, J: int, n_transitions: int):
    """Per-transition EE matrix and EN/NE vectors tallied from the event log."""
    e = events
    ee_mask = e["kind"].isin([EE_RELOCATION, EE_VOLUNTARY]).to_numpy()
    ee = np.zeros((J, J))
    np.add.at(ee, (e["origin"].to_numpy()[ee_mask], e["destination"].to_numpy()[ee_mask]), 1.0)
    en_mask = e["kind"].isin([EN_EXOGENOUS, EN_VOLUNTARY]).to_numpy()
    en = np.bincount(e["origin"].to_numpy()[en_mask], minlength=J).astype(float)
    ne_mask = (e["kind"] == NE_HIRE).to_numpy()
    ne = np.bincount(e["destination"].to_numpy()[ne_mask], minlength=J).astype(float)
    k = max(n_transitions, 1)
    return ee / k, en / k, ne / k


# ---------------------------------------------------------------------------
# vacancy texts

AD_BASE_DATE = "2010-01-01"
MAX_AD_DURATION = 120

_INTRO = (
    "Vi er en voksende virksomhet med kunder over hele landet.",
    "Avdelingen har i dag tolv medarbeidere.",
    "Bedriften leverer tjenester til offentlige og private kunder.",
    "Vi har behov for en ny medarbeider.",
    "Stillingen rapporterer til avdelingsleder.",
)
_TASKS = (
    "Oppfølging av kunder", "Planlegging og rapportering", "Saksbehandling",
    "Drift og vedlikehold av systemer", "Deltakelse i prosjekter", "Dokumentasjon og kvalitetssikring",
)
_QUALS = (
    "Relevant utdanning", "Gode samarbeidsevner", "Beherske norsk muntlig og skriftlig",
    "Erfaring fra lignende arbeid", "Førerkort klasse B", "Strukturert og nøyaktig",
)
_CLOSING = (
    "Søknaden sendes elektronisk.",
    "Kontakt oss gjerne for mer informasjon om stillingen.",
    "Søkere vurderes fortløpende.",
)
_HEADERS = ("Arbeidsoppgaver:", "Kvalifikasjoner:", "Vi tilbyr:")
_SENTENCE_FRAME = "Hos oss får du {}."


def distractor_sentences() -> tuple[str, ...]:
    """All filler text the synthesizer may emit around planted expressions."""
    return _INTRO + _TASKS + _QUALS + _CLOSING + _HEADERS + (_SENTENCE_FRAME.format(""),)


def _check_templates(dictionary) -> None:
    from .text import clean_text

    for s in distractor_sentences():
        hit, _ = dictionary.match(clean_text(s)[0])
        if hit.any():
            bad = [dictionary.names[i] for i in np.flatnonzero(hit)]
            raise ConfigurationError(f"filler text {s!r} triggers dictionary attributes {bad}")


def draw_attribute_plan(params: EconomyParams, dictionary, seed: int, ads_per_employer: int = 4,
                        base_range=(0.05, 0.5), loading: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Random binary plan (one row per ad) whose odds rise with the employer's
    pay premium for pay attributes and with its amenity value otherwise.

    Returns the employer index of each ad and the plan matrix.
    """
    from scipy.special import expit, logit

    from .text import PAY_CATEGORIES

    J, K = params.J, len(dictionary)
    kid = np.arange(K)
    base = _uniform_from(rng.uniform(seed, kid, -3, 0), base_range)
    pay = np.array([a.category in PAY_CATEGORIES for a in dictionary.attributes])
    w = params.f

    def std(x):
        m = np.sum(w * x)
        sd = np.sqrt(np.sum(w * (x - m) ** 2))
        return (x - m) / sd if sd > 0 else np.zeros_like(x)

    z = np.where(pay[None, :], std(params.psi)[:, None], std(params.a)[:, None])
    p_emp = expit(logit(base)[None, :] + loading * z)
    employer = np.repeat(np.arange(J), ads_per_employer)
    ad = np.arange(employer.size)
    u = rng.uniform(seed, ad[:, None], -4, kid[None, :])
    return employer, (u < p_emp[employer]).astype(np.int8)


def synthesize_ads(params: EconomyParams, attribute_plan, dictionary, seed: int, employer_of_ad=None,
                   establishments: pd.DataFrame | None = None, base_date: str = AD_BASE_DATE,
                   n_years: int = 10):
    """Template vacancy texts carrying exactly the planted attributes.

    ``attribute_plan`` has one row per ad and one column per dictionary
    attribute; ``employer_of_ad`` maps rows to employers (default: row i is
    employer i, so the plan is J x K).  Every planted attribute appears
    through one of its expressions, either as a bullet under the offer
    header or inside a sentence.  All other text comes from a fixed filler
    set that is checked against the dictionary first.
    """
    from .text import AdRecord, surface_form

    plan = np.asarray(attribute_plan).astype(bool)
    K = len(dictionary)
    if plan.ndim != 2 or plan.shape[1] != K:
        raise ConfigurationError(f"attribute plan must have {K} columns, got shape {plan.shape}")
    employer = np.arange(plan.shape[0]) if employer_of_ad is None else np.asarray(employer_of_ad, dtype=np.int64)
    if employer.shape != (plan.shape[0],) or (employer.size and (employer.min() < 0 or employer.max() >= params.J)):
        raise ConfigurationError("employer_of_ad must give an employer index in [0, J) for every plan row")
    by_attr = {}
    for expr, aid in dictionary.entries.items():
        by_attr.setdefault(aid, []).append(expr)
    options = []
    for a in dictionary.attributes:
        ex = sorted(by_attr.get(a.attribute_id, []))
        if not ex and plan[:, len(options)].any():
            raise ConfigurationError(f"attribute {a.name} is planted but has no expressions")
        options.append(ex)
    _check_templates(dictionary)

    occ = establishments.set_index("establishment_id")["occupation"] if establishments is not None else None
    base = np.datetime64(base_date)
    span = 365 * n_years
    n = plan.shape[0]
    ids = np.arange(n)

    def draws(slot, lo, hi):
        return rng.integers(seed, ids, -5, slot, lo, hi)

    intro, task0, qual0 = draws(0, 0, len(_INTRO) - 1), draws(1, 0, len(_TASKS) - 2), draws(2, 0, len(_QUALS) - 2)
    closing, offset, duration = draws(3, 0, len(_CLOSING) - 1), draws(4, 0, span - 1), draws(5, 1, MAX_AD_DURATION)
    online, disclosed = draws(6, 0, 9) > 0, draws(7, 0, 9) > 0
    kk = np.arange(K)
    n_opt = np.array([max(len(ex), 1) for ex in options])
    pick = rng.integers(seed, ids[:, None], -5, 10 + kk[None, :], 0, n_opt[None, :] - 1)
    in_prose = rng.integers(seed, ids[:, None], -5, 10 + K + kk[None, :], 0, 3) == 0
    surfaces = [[surface_form(e) for e in ex] for ex in options]
    ads = []
    for i in range(n):
        lines = [_INTRO[intro[i]], "", _HEADERS[0]]
        lines += [f"- {x}" for x in _TASKS[task0[i]:task0[i] + 2]]
        lines += ["", _HEADERS[1]]
        lines += [f"- {x}" for x in _QUALS[qual0[i]:qual0[i] + 2]]
        bullets, sentences = [], []
        for k in np.flatnonzero(plan[i]):
            (sentences if in_prose[i, k] else bullets).append(surfaces[k][pick[i, k]])
        if len(bullets) == 1:
            # a lone bullet is not a list; keep the shape by moving it into prose
            sentences.append(bullets.pop())
        if bullets:
            lines += ["", _HEADERS[2]] + [f"- {b}" for b in bullets]
        lines += [""] + [_SENTENCE_FRAME.format(s) for s in sentences]
        lines.append(_CLOSING[closing[i]])
        posted = base + np.timedelta64(int(offset[i]), "D")
        unlisted = posted + np.timedelta64(int(duration[i]), "D")
        j = int(employer[i])
        ads.append(AdRecord(
            ad_id=i,
            establishment_id=j,
            posted_date=str(posted),
            unlisted_date=str(unlisted),
            text="\n".join(lines),
            occupation="" if occ is None else str(occ.get(j, "")),
            online_posted=bool(online[i]),
            employer_name_disclosed=bool(disclosed[i]),
        ))
    return ads


def write_panel_csv(panel: pd.DataFrame, path) -> None:
    panel.to_csv(path, index=False, float_format="%.10g")


def write_ads_jsonl(ads, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ad in ads:
            fh.write(ad.to_json() + "\n")
