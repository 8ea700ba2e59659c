//! Market primitives for the Hotelling broker problem.
//!
//! Two sellers sit at the ends of the unit interval; each can charge a high
//! or a low price. A broker privately recommends a price pair drawn from a
//! per-type distribution and charges participation fees. Everything in this
//! module is a pure function of immutable value data: purchase best
//! responses, misreport utilities, seller revenues, obedience slacks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for feasibility comparisons unless a scenario
/// overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Tolerance for probability-mass normalization checks.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("reported location {0} is not a population type")]
    UnknownReportedType(f64),
    #[error("mechanism shape mismatch: {0}")]
    MechanismShape(String),
    #[error("invalid mechanism: {0}")]
    InvalidMechanism(String),
}

/// Which gross-value configuration the market uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Seller 1 dominates: `V1 = V`, `V2 = V - t`. At equal prices every
    /// consumer weakly prefers seller 1.
    Asymmetric,
    /// Both sellers offer the same gross value `V`.
    Symmetric,
}

/// Market parameters: gross values, transport cost and the two price levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarketParams {
    v1: f64,
    v2: f64,
    t: f64,
    h: f64,
    l: f64,
    variant: Variant,
}

impl MarketParams {
    /// Asymmetric market: `V1 = V`, `V2 = V - t`.
    pub fn asymmetric(v: f64, t: f64, h: f64, l: f64) -> Result<Self, ModelError> {
        Self::validated(v, v - t, t, h, l, Variant::Asymmetric)
    }

    /// Symmetric market: `V1 = V2 = V`.
    pub fn symmetric(v: f64, t: f64, h: f64, l: f64) -> Result<Self, ModelError> {
        Self::validated(v, v, t, h, l, Variant::Symmetric)
    }

    fn validated(
        v1: f64,
        v2: f64,
        t: f64,
        h: f64,
        l: f64,
        variant: Variant,
    ) -> Result<Self, ModelError> {
        for (name, x) in [("V1", v1), ("V2", v2), ("t", t), ("H", h), ("L", l)] {
            if !x.is_finite() {
                return Err(ModelError::InvalidParams(format!("{name} must be finite")));
            }
        }
        if !(l < h) {
            return Err(ModelError::InvalidParams(format!(
                "L < H required, got L = {l}, H = {h}"
            )));
        }
        if !(t > 0.0) {
            return Err(ModelError::InvalidParams(format!("t > 0 required, got {t}")));
        }
        if !(l > 0.0) {
            return Err(ModelError::InvalidParams(format!("L > 0 required, got {l}")));
        }
        if !(v1 - t - h > 0.0) {
            return Err(ModelError::InvalidParams(format!(
                "V - t - H > 0 required so that every consumer prefers buying, got {}",
                v1 - t - h
            )));
        }
        Ok(Self { v1, v2, t, h, l, variant })
    }

    pub fn gross_value_1(&self) -> f64 {
        self.v1
    }

    pub fn gross_value_2(&self) -> f64 {
        self.v2
    }

    pub fn transport_cost(&self) -> f64 {
        self.t
    }

    pub fn high_price(&self) -> f64 {
        self.h
    }

    pub fn low_price(&self) -> f64 {
        self.l
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn price(&self, level: PriceLevel) -> f64 {
        match level {
            PriceLevel::High => self.h,
            PriceLevel::Low => self.l,
        }
    }

    /// The location indifferent between seller 1 at `H` and seller 2 at `L`,
    /// clamped to the unit interval. In the asymmetric market this is the
    /// single segment boundary.
    pub fn lower_boundary(&self) -> f64 {
        (1.0 - (self.h - self.l) / (2.0 * self.t)).clamp(0.0, 1.0)
    }

    /// Gross utility of consumer `x` buying from `seller` at price `price`.
    pub fn purchase_utility(&self, x: f64, seller: SellerId, price: f64) -> f64 {
        match seller {
            SellerId::S1 => self.v1 - x * self.t - price,
            SellerId::S2 => self.v2 - (1.0 - x) * self.t - price,
        }
    }
}

/// Raw mirror of [`MarketParams`] so deserialization re-runs validation.
#[derive(Deserialize)]
struct RawMarketParams {
    v1: f64,
    v2: f64,
    t: f64,
    h: f64,
    l: f64,
    variant: Variant,
}

impl TryFrom<RawMarketParams> for MarketParams {
    type Error = String;

    fn try_from(raw: RawMarketParams) -> Result<Self, String> {
        if raw.variant == Variant::Asymmetric && (raw.v2 - (raw.v1 - raw.t)).abs() > 1e-9 {
            return Err(format!(
                "asymmetric variant requires V2 = V1 - t, got V1 = {}, V2 = {}, t = {}",
                raw.v1, raw.v2, raw.t
            ));
        }
        if raw.variant == Variant::Symmetric && (raw.v1 - raw.v2).abs() > 1e-9 {
            return Err(format!(
                "symmetric variant requires V1 = V2, got V1 = {}, V2 = {}",
                raw.v1, raw.v2
            ));
        }
        MarketParams::validated(raw.v1, raw.v2, raw.t, raw.h, raw.l, raw.variant)
            .map_err(|e| e.to_string())
    }
}

impl<'de> Deserialize<'de> for MarketParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawMarketParams::deserialize(deserializer)?;
        MarketParams::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// One point mass of consumers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsumerType {
    pub location: f64,
    pub mass: f64,
}

/// Consumer distribution over the Hotelling line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// Finite list of point masses, locations strictly increasing, masses
    /// summing to one.
    Discrete(Vec<ConsumerType>),
    /// Uniform density on `[0, 1]`; discretized before entering the LP.
    Uniform,
}

impl Population {
    pub fn discrete(points: Vec<ConsumerType>) -> Result<Self, ModelError> {
        validate_types(&points)?;
        Ok(Population::Discrete(points))
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Population::Uniform)
    }
}

/// Checks the discrete-population invariants for a type list.
pub fn validate_types(points: &[ConsumerType]) -> Result<(), ModelError> {
    if points.is_empty() {
        return Err(ModelError::InvalidPopulation("population is empty".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        if !(0.0..=1.0).contains(&p.location) {
            return Err(ModelError::InvalidPopulation(format!(
                "location {} outside [0, 1]",
                p.location
            )));
        }
        if !(p.mass > 0.0) {
            return Err(ModelError::InvalidPopulation(format!(
                "mass {} at x = {} must be positive",
                p.mass, p.location
            )));
        }
        if i > 0 && points[i - 1].location >= p.location {
            return Err(ModelError::InvalidPopulation(format!(
                "locations must be strictly increasing, got {} then {}",
                points[i - 1].location,
                p.location
            )));
        }
        total += p.mass;
    }
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(ModelError::InvalidPopulation(format!(
            "masses sum to {total}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SellerId {
    S1,
    S2,
}

impl SellerId {
    pub const BOTH: [SellerId; 2] = [SellerId::S1, SellerId::S2];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceLevel {
    High,
    Low,
}

impl PriceLevel {
    pub const BOTH: [PriceLevel; 2] = [PriceLevel::High, PriceLevel::Low];

    pub fn other(self) -> PriceLevel {
        match self {
            PriceLevel::High => PriceLevel::Low,
            PriceLevel::Low => PriceLevel::High,
        }
    }
}

/// A price pair privately recommended to the sellers. The first component is
/// seller 1's price. Serialization order is fixed as `(HH, HL, LH, LL)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriceSignal {
    HH,
    HL,
    LH,
    LL,
}

impl PriceSignal {
    pub const ALL: [PriceSignal; 4] = [
        PriceSignal::HH,
        PriceSignal::HL,
        PriceSignal::LH,
        PriceSignal::LL,
    ];

    pub fn index(self) -> usize {
        match self {
            PriceSignal::HH => 0,
            PriceSignal::HL => 1,
            PriceSignal::LH => 2,
            PriceSignal::LL => 3,
        }
    }

    pub fn from_levels(s1: PriceLevel, s2: PriceLevel) -> PriceSignal {
        match (s1, s2) {
            (PriceLevel::High, PriceLevel::High) => PriceSignal::HH,
            (PriceLevel::High, PriceLevel::Low) => PriceSignal::HL,
            (PriceLevel::Low, PriceLevel::High) => PriceSignal::LH,
            (PriceLevel::Low, PriceLevel::Low) => PriceSignal::LL,
        }
    }

    pub fn seller_level(self, seller: SellerId) -> PriceLevel {
        let (s1, s2) = self.levels();
        match seller {
            SellerId::S1 => s1,
            SellerId::S2 => s2,
        }
    }

    pub fn levels(self) -> (PriceLevel, PriceLevel) {
        match self {
            PriceSignal::HH => (PriceLevel::High, PriceLevel::High),
            PriceSignal::HL => (PriceLevel::High, PriceLevel::Low),
            PriceSignal::LH => (PriceLevel::Low, PriceLevel::High),
            PriceSignal::LL => (PriceLevel::Low, PriceLevel::Low),
        }
    }

    /// The signal obtained when `seller` deviates to `level` while the other
    /// seller keeps the recommendation.
    pub fn with_seller_level(self, seller: SellerId, level: PriceLevel) -> PriceSignal {
        let (s1, s2) = self.levels();
        match seller {
            SellerId::S1 => PriceSignal::from_levels(level, s2),
            SellerId::S2 => PriceSignal::from_levels(s1, level),
        }
    }
}

/// Outcome of a consumer's best response to a realized price pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurchaseOutcome {
    pub chosen_seller: SellerId,
    pub paid_price: f64,
    pub net_utility: f64,
}

/// Consumer best response: buys from seller 1 iff
/// `V1 - xt - p1 >= V2 - (1-x)t - p2`; ties go to seller 1.
pub fn purchase(x: f64, signal: PriceSignal, params: &MarketParams) -> PurchaseOutcome {
    let (l1, l2) = signal.levels();
    let p1 = params.price(l1);
    let p2 = params.price(l2);
    let u1 = params.purchase_utility(x, SellerId::S1, p1);
    let u2 = params.purchase_utility(x, SellerId::S2, p2);
    if u1 >= u2 {
        PurchaseOutcome { chosen_seller: SellerId::S1, paid_price: p1, net_utility: u1 }
    } else {
        PurchaseOutcome { chosen_seller: SellerId::S2, paid_price: p2, net_utility: u2 }
    }
}

/// Gross best-response utility of consumer `x` under a realized price pair,
/// i.e. `max { V1 - xt - s1, V2 - (1-x)t - s2 }`.
pub fn signal_utility(x: f64, signal: PriceSignal, params: &MarketParams) -> f64 {
    purchase(x, signal, params).net_utility
}

/// Segment cut points of the market, clamped to `[0, 1]`.
///
/// Asymmetric: the single location indifferent between seller 1 at `H` and
/// seller 2 at `L`. Symmetric: the three cuts where the best response flips
/// under `(H,L)`, equal prices, and `(L,H)` respectively.
pub fn segment_boundaries(params: &MarketParams) -> Vec<f64> {
    let spread = (params.high_price() - params.low_price()) / (2.0 * params.transport_cost());
    match params.variant() {
        Variant::Asymmetric => vec![(1.0 - spread).clamp(0.0, 1.0)],
        Variant::Symmetric => vec![
            (0.5 - spread).clamp(0.0, 1.0),
            0.5,
            (0.5 + spread).clamp(0.0, 1.0),
        ],
    }
}

/// Index of the segment containing `x`; boundary points belong to the lower
/// segment.
pub fn segment_of(x: f64, params: &MarketParams) -> usize {
    let cuts = segment_boundaries(params);
    cuts.iter().filter(|&&c| x > c).count()
}

/// A direct mechanism over a finite type list: per-type signal distribution,
/// per-type consumer fee, and the two seller fees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    /// Row `i` is the distribution over `(HH, HL, LH, LL)` for type `i`.
    pub scheme: Vec<[f64; 4]>,
    pub consumer_fees: Vec<f64>,
    pub seller_fees: (f64, f64),
}

impl Mechanism {
    /// Checks the mechanism's own invariants: rows are probability
    /// distributions and fees are nonnegative (consumer fees only when
    /// `fee_nonneg` holds for the scenario).
    pub fn validate(&self, fee_nonneg: bool, tol: f64) -> Result<(), ModelError> {
        if self.scheme.len() != self.consumer_fees.len() {
            return Err(ModelError::MechanismShape(format!(
                "{} scheme rows vs {} fees",
                self.scheme.len(),
                self.consumer_fees.len()
            )));
        }
        for (i, row) in self.scheme.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(ModelError::InvalidMechanism(format!(
                    "signal distribution for type {i} sums to {sum}"
                )));
            }
            if row.iter().any(|&p| p < -tol || p > 1.0 + tol) {
                return Err(ModelError::InvalidMechanism(format!(
                    "signal probability outside [0, 1] for type {i}"
                )));
            }
        }
        if fee_nonneg {
            if let Some((i, &f)) = self
                .consumer_fees
                .iter()
                .enumerate()
                .find(|(_, &f)| f < -tol)
            {
                return Err(ModelError::InvalidMechanism(format!(
                    "consumer fee {f} for type {i} is negative"
                )));
            }
        }
        if self.seller_fees.0 < -tol || self.seller_fees.1 < -tol {
            return Err(ModelError::InvalidMechanism(format!(
                "seller fees must be nonnegative, got {:?}",
                self.seller_fees
            )));
        }
        Ok(())
    }

    pub fn signal_probability(&self, type_idx: usize, signal: PriceSignal) -> f64 {
        self.scheme[type_idx][signal.index()]
    }

    /// Broker revenue: seller fees plus mass-weighted consumer fees.
    pub fn revenue(&self, types: &[ConsumerType]) -> f64 {
        let fees: f64 = types
            .iter()
            .zip(&self.consumer_fees)
            .map(|(ty, fee)| ty.mass * fee)
            .sum();
        self.seller_fees.0 + self.seller_fees.1 + fees
    }
}

fn type_index(types: &[ConsumerType], location: f64) -> Result<usize, ModelError> {
    types
        .iter()
        .position(|ty| (ty.location - location).abs() <= MASS_TOLERANCE)
        .ok_or(ModelError::UnknownReportedType(location))
}

/// Expected best-response utility of consumer `x` reporting `x_reported`,
/// gross of fees: `sum_s pi(s | x_reported) * max { ... }`.
pub fn misreport_utility(
    x: f64,
    x_reported: f64,
    mech: &Mechanism,
    types: &[ConsumerType],
    params: &MarketParams,
) -> Result<f64, ModelError> {
    let j = type_index(types, x_reported)?;
    Ok(expected_utility_under_row(x, &mech.scheme[j], params))
}

/// Expected best-response utility of consumer `x` facing the signal
/// distribution `row`.
pub fn expected_utility_under_row(x: f64, row: &[f64; 4], params: &MarketParams) -> f64 {
    PriceSignal::ALL
        .iter()
        .map(|&s| row[s.index()] * signal_utility(x, s, params))
        .sum()
}

/// Truthful expected utility of type `i`, gross of fees.
pub fn truthful_utility(
    type_idx: usize,
    mech: &Mechanism,
    types: &[ConsumerType],
    params: &MarketParams,
) -> f64 {
    expected_utility_under_row(types[type_idx].location, &mech.scheme[type_idx], params)
}

/// Expected revenue of `seller` when both sellers follow recommendations:
/// `sum_x sum_s lambda(x) pi(s|x) s_i 1{consumer buys from i}`.
pub fn seller_expected_revenue(
    seller: SellerId,
    mech: &Mechanism,
    types: &[ConsumerType],
    params: &MarketParams,
) -> f64 {
    let mut total = 0.0;
    for (ty, row) in types.iter().zip(&mech.scheme) {
        for s in PriceSignal::ALL {
            let p = row[s.index()];
            if p == 0.0 {
                continue;
            }
            let outcome = purchase(ty.location, s, params);
            if outcome.chosen_seller == seller {
                total += ty.mass * p * outcome.paid_price;
            }
        }
    }
    total
}

/// Obedience slack for `seller` when recommended `recommended` and weighing a
/// deviation to `deviation`: (revenue from obeying) minus (revenue from
/// deviating), with the purchase indicator re-evaluated at the deviated
/// price. Nonnegative iff the recommendation is obedient. A price never
/// recommended to the seller yields slack 0 by convention.
pub fn obedience_slack(
    seller: SellerId,
    recommended: PriceLevel,
    deviation: PriceLevel,
    mech: &Mechanism,
    types: &[ConsumerType],
    params: &MarketParams,
) -> f64 {
    debug_assert!(recommended != deviation);
    let mut conditioning_mass = 0.0;
    let mut obey = 0.0;
    let mut deviate = 0.0;
    for (ty, row) in types.iter().zip(&mech.scheme) {
        for s in PriceSignal::ALL {
            if s.seller_level(seller) != recommended {
                continue;
            }
            let p = ty.mass * row[s.index()];
            if p == 0.0 {
                continue;
            }
            conditioning_mass += p;
            let on_path = purchase(ty.location, s, params);
            if on_path.chosen_seller == seller {
                obey += p * on_path.paid_price;
            }
            let deviated = s.with_seller_level(seller, deviation);
            let off_path = purchase(ty.location, deviated, params);
            if off_path.chosen_seller == seller {
                deviate += p * off_path.paid_price;
            }
        }
    }
    if conditioning_mass <= f64::EPSILON {
        return 0.0;
    }
    obey - deviate
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asym(v: f64, t: f64, h: f64, l: f64) -> MarketParams {
        MarketParams::asymmetric(v, t, h, l).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(MarketParams::asymmetric(1000.0, 1.0, 9.0, 9.0).is_err()); // L = H
        assert!(MarketParams::asymmetric(1000.0, 0.0, 10.0, 9.0).is_err()); // t = 0
        assert!(MarketParams::asymmetric(1000.0, 1.0, 10.0, -1.0).is_err()); // L < 0
        assert!(MarketParams::asymmetric(10.0, 1.0, 10.0, 9.0).is_err()); // V - t - H <= 0
    }

    #[test]
    fn segment_boundary_asymmetric() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        assert_eq!(segment_boundaries(&p), vec![0.5]);
        let p = asym(1000.0, 6.0, 12.0, 9.0);
        assert_eq!(segment_boundaries(&p), vec![0.75]);
        // H - L > 2t clamps the boundary at 0.
        let p = asym(1000.0, 1.0, 12.0, 9.0);
        assert_eq!(segment_boundaries(&p), vec![0.0]);
    }

    #[test]
    fn segment_boundaries_symmetric_example() {
        let p = MarketParams::symmetric(10000.0, 18.0, 10.0, 1.0).unwrap();
        let cuts = segment_boundaries(&p);
        assert!((cuts[0] - 0.25).abs() < 1e-15);
        assert!((cuts[1] - 0.5).abs() < 1e-15);
        assert!((cuts[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn purchase_picks_indicator_side() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        // Below the boundary the dominant seller wins even at (H, L).
        let below = purchase(0.3, PriceSignal::HL, &p);
        assert_eq!(below.chosen_seller, SellerId::S1);
        assert!((below.net_utility - 989.7).abs() < 1e-12);
        // Above the boundary the low-priced rival wins.
        let above = purchase(0.9, PriceSignal::HL, &p);
        assert_eq!(above.chosen_seller, SellerId::S2);
        assert!((above.net_utility - 989.9).abs() < 1e-12);
    }

    #[test]
    fn purchase_tie_goes_to_seller_1() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        // At the boundary, (H, L) leaves the consumer exactly indifferent.
        let at = purchase(0.5, PriceSignal::HL, &p);
        assert_eq!(at.chosen_seller, SellerId::S1);
        // Symmetric variant at the midpoint with equal prices is also a tie.
        let sym = MarketParams::symmetric(10000.0, 18.0, 10.0, 1.0).unwrap();
        assert_eq!(purchase(0.5, PriceSignal::LL, &sym).chosen_seller, SellerId::S1);
    }

    #[test]
    fn population_validation() {
        let ok = Population::discrete(vec![
            ConsumerType { location: 0.2, mass: 0.5 },
            ConsumerType { location: 0.8, mass: 0.5 },
        ]);
        assert!(ok.is_ok());
        let dup = Population::discrete(vec![
            ConsumerType { location: 0.2, mass: 0.5 },
            ConsumerType { location: 0.2, mass: 0.5 },
        ]);
        assert!(dup.is_err());
        let short = Population::discrete(vec![ConsumerType { location: 0.2, mass: 0.9 }]);
        assert!(short.is_err());
    }

    fn degenerate_ll(n: usize) -> Mechanism {
        Mechanism {
            scheme: vec![[0.0, 0.0, 0.0, 1.0]; n],
            consumer_fees: vec![0.0; n],
            seller_fees: (0.0, 0.0),
        }
    }

    #[test]
    fn misreport_matches_truthful_when_honest() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        let types = vec![
            ConsumerType { location: 0.3, mass: 0.4 },
            ConsumerType { location: 0.7, mass: 0.6 },
        ];
        let mech = degenerate_ll(2);
        let honest = misreport_utility(0.3, 0.3, &mech, &types, &p).unwrap();
        assert!((honest - truthful_utility(0, &mech, &types, &p)).abs() < 1e-12);
        // Degenerate (L, L) scheme: seller 1 dominates at equal prices.
        assert!((honest - (1000.0 - 0.3 - 9.0)).abs() < 1e-12);
        assert!(misreport_utility(0.3, 0.5, &mech, &types, &p).is_err());
    }

    #[test]
    fn all_ll_revenue_goes_to_seller_1() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        let types = vec![
            ConsumerType { location: 0.3, mass: 0.4 },
            ConsumerType { location: 0.7, mass: 0.6 },
        ];
        let mech = degenerate_ll(2);
        let u1 = seller_expected_revenue(SellerId::S1, &mech, &types, &p);
        let u2 = seller_expected_revenue(SellerId::S2, &mech, &types, &p);
        assert!((u1 - 9.0).abs() < 1e-12);
        assert_eq!(u2, 0.0);
    }

    /// The full-extraction scheme on a discrete grid: (H,H) below the
    /// boundary, (L,L) at or above.
    fn no_privacy_scheme(types: &[ConsumerType], params: &MarketParams) -> Mechanism {
        let cut = params.lower_boundary();
        let scheme: Vec<[f64; 4]> = types
            .iter()
            .map(|ty| {
                if ty.location < cut {
                    [1.0, 0.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 1.0]
                }
            })
            .collect();
        let n = types.len();
        Mechanism { scheme, consumer_fees: vec![0.0; n], seller_fees: (0.0, 0.0) }
    }

    #[test]
    fn obedience_slack_on_full_extraction_grid() {
        let p = asym(1000.0, 1.0, 10.0, 9.0);
        // Even 10-point midpoint grid: half the mass below 0.5, half above.
        let types: Vec<ConsumerType> = (0..10)
            .map(|i| ConsumerType { location: (i as f64 + 0.5) / 10.0, mass: 0.1 })
            .collect();
        let mech = no_privacy_scheme(&types, &p);
        let slack = obedience_slack(
            SellerId::S1,
            PriceLevel::High,
            PriceLevel::Low,
            &mech,
            &types,
            &p,
        );
        // 0.5 * H - 0.5 * L = 0.5 on the uniform grid.
        assert!((slack - 0.5).abs() < 1e-12);
        // Seller 2 is never recommended High here: vacuous constraint.
        let vac = obedience_slack(
            SellerId::S2,
            PriceLevel::High,
            PriceLevel::Low,
            &mech,
            &types,
            &p,
        );
        assert_eq!(vac, 0.0);
    }

    #[test]
    fn mechanism_validation_flags_bad_rows() {
        let mut mech = degenerate_ll(2);
        mech.scheme[0] = [0.5, 0.0, 0.0, 0.4];
        assert!(mech.validate(true, 1e-9).is_err());
        let mut mech = degenerate_ll(2);
        mech.consumer_fees[1] = -0.5;
        assert!(mech.validate(true, 1e-9).is_err());
        assert!(mech.validate(false, 1e-9).is_ok());
    }

    prop_compose! {
        fn arb_params()(
            t in 0.2f64..5.0,
            gap in 0.1f64..4.0,
            l in 0.5f64..20.0,
            slackv in 1.0f64..100.0,
            sym in any::<bool>(),
        ) -> MarketParams {
            let h = l + gap;
            let v = h + t + slackv;
            if sym {
                MarketParams::symmetric(v, t, h, l).unwrap()
            } else {
                MarketParams::asymmetric(v, t, h, l).unwrap()
            }
        }
    }

    prop_compose! {
        fn arb_types()(raw in proptest::collection::vec((0.0f64..1.0, 0.05f64..1.0), 1..6)) -> Vec<ConsumerType> {
            let mut xs: Vec<f64> = raw.iter().map(|r| r.0).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            let total: f64 = raw[..xs.len()].iter().map(|r| r.1).sum();
            xs.iter()
                .zip(&raw[..xs.len()])
                .map(|(&x, r)| ConsumerType { location: x, mass: r.1 / total })
                .collect()
        }
    }

    prop_compose! {
        fn arb_scheme(n: usize)(raw in proptest::collection::vec([0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0], n)) -> Vec<[f64; 4]> {
            raw.into_iter()
                .map(|row| {
                    let sum: f64 = row.iter().sum();
                    if sum <= 0.0 {
                        [0.0, 0.0, 0.0, 1.0]
                    } else {
                        [row[0] / sum, row[1] / sum, row[2] / sum, row[3] / sum]
                    }
                })
                .collect()
        }
    }

    proptest! {
        #[test]
        fn purchase_total_and_deterministic(params in arb_params(), x in 0.0f64..1.0) {
            for s in PriceSignal::ALL {
                let a = purchase(x, s, &params);
                let b = purchase(x, s, &params);
                prop_assert_eq!(a, b);
                let u1 = params.purchase_utility(x, SellerId::S1, params.price(s.levels().0));
                let u2 = params.purchase_utility(x, SellerId::S2, params.price(s.levels().1));
                prop_assert!((a.net_utility - u1.max(u2)).abs() < 1e-12);
            }
        }

        #[test]
        fn asymmetric_equal_prices_choose_seller_1(
            t in 0.2f64..5.0, gap in 0.1f64..4.0, l in 0.5f64..20.0, extra in 1.0f64..100.0,
            x in 0.0f64..=1.0,
        ) {
            let h = l + gap;
            let params = MarketParams::asymmetric(h + t + extra, t, h, l).unwrap();
            prop_assert_eq!(purchase(x, PriceSignal::LL, &params).chosen_seller, SellerId::S1);
            prop_assert_eq!(purchase(x, PriceSignal::HH, &params).chosen_seller, SellerId::S1);
        }

        #[test]
        fn misreport_utility_is_lipschitz_in_true_type(
            params in arb_params(),
            row in arb_scheme(1),
            x1 in 0.0f64..1.0,
            x2 in 0.0f64..1.0,
        ) {
            // Each signal term has slope +/- t, so the mixture is t-Lipschitz.
            let u1 = expected_utility_under_row(x1, &row[0], &params);
            let u2 = expected_utility_under_row(x2, &row[0], &params);
            let bound = params.transport_cost() * (x1 - x2).abs() + 1e-9;
            prop_assert!((u1 - u2).abs() <= bound);
        }

        #[test]
        fn seller_revenues_partition_price_flow(params in arb_params(), types in arb_types()) {
            let scheme = {
                // Deterministic pseudo-random scheme derived from locations.
                types
                    .iter()
                    .map(|ty| {
                        let a = (ty.location * 7.31).fract();
                        let b = (ty.location * 3.17 + 0.41).fract();
                        let c = (ty.location * 5.73 + 0.13).fract();
                        let total = a + b + c + 0.25;
                        [a / total, b / total, c / total, 0.25 / total]
                    })
                    .collect::<Vec<_>>()
            };
            let n = types.len();
            let mech = Mechanism { scheme, consumer_fees: vec![0.0; n], seller_fees: (0.0, 0.0) };
            let u1 = seller_expected_revenue(SellerId::S1, &mech, &types, &params);
            let u2 = seller_expected_revenue(SellerId::S2, &mech, &types, &params);
            let total: f64 = types
                .iter()
                .zip(&mech.scheme)
                .map(|(ty, row)| {
                    PriceSignal::ALL
                        .iter()
                        .map(|&s| ty.mass * row[s.index()] * purchase(ty.location, s, &params).paid_price)
                        .sum::<f64>()
                })
                .sum();
            prop_assert!((u1 + u2 - total).abs() < 1e-9 * total.abs().max(1.0));
        }

        #[test]
        fn obedience_slack_matches_cell_enumeration(params in arb_params(), types in arb_types()) {
            let scheme: Vec<[f64; 4]> = types
                .iter()
                .map(|ty| {
                    let a = (ty.location * 11.13).fract();
                    let b = (ty.location * 2.71 + 0.2).fract();
                    let total = a + b + 1.0;
                    [a / total, b / total, 0.5 / total, 0.5 / total]
                })
                .collect();
            let n = types.len();
            let mech = Mechanism { scheme, consumer_fees: vec![0.0; n], seller_fees: (0.0, 0.0) };
            for seller in SellerId::BOTH {
                for rec in PriceLevel::BOTH {
                    let dev = rec.other();
                    let fast = obedience_slack(seller, rec, dev, &mech, &types, &params);
                    // Brute enumeration over every (type, signal) cell.
                    let mut slow = 0.0;
                    let mut mass = 0.0;
                    for (ty, row) in types.iter().zip(&mech.scheme) {
                        for s in PriceSignal::ALL {
                            if s.seller_level(seller) != rec {
                                continue;
                            }
                            let w = ty.mass * row[s.index()];
                            mass += w;
                            let obey = purchase(ty.location, s, &params);
                            let dv = purchase(ty.location, s.with_seller_level(seller, dev), &params);
                            slow += w
                                * ((if obey.chosen_seller == seller { obey.paid_price } else { 0.0 })
                                    - (if dv.chosen_seller == seller { dv.paid_price } else { 0.0 }));
                        }
                    }
                    if mass > f64::EPSILON {
                        prop_assert!((fast - slow).abs() < 1e-9);
                    } else {
                        prop_assert_eq!(fast, 0.0);
                    }
                }
            }
        }
    }
}
