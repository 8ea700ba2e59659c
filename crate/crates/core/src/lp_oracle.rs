//! The broker's revenue-maximization program for finite scenarios.
//!
//! Builds the full linear program — signal simplex rows, consumer incentive
//! compatibility, consumer participation, seller obedience, seller
//! participation — solves it with the in-crate simplex engine, and re-audits
//! every constraint from first principles on the assembled mechanism. This
//! module is the ground-truth verifier for the closed-form solvers, so it
//! never reuses their shortcuts: IC rows are generated for all ordered type
//! pairs and the audit re-derives slacks from the model primitives rather
//! than from LP rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, expected_utility_under_row, obedience_slack, purchase, segment_boundaries,
    seller_expected_revenue, signal_utility, validate_types, ConsumerType, MarketParams, Mechanism,
    ModelError, Population, PriceLevel, PriceSignal, SellerId, Variant, DEFAULT_TOLERANCE,
};
use crate::simplex::{
    self, Bounds, LinearProgram, Relation, SimplexError, SolveStatus,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SimplexError),
    #[error("LP terminated with status {0:?}; the broker program is always feasible and bounded, so this indicates a construction bug")]
    UnexpectedStatus(SolveStatus),
    #[error("uniform population needs a grid of at least 2 types, got {0}")]
    GridTooSmall(usize),
    #[error("instance too large for brute-force verification: {0}")]
    InstanceTooLarge(String),
    #[error("unsupported scenario: {0}")]
    Unsupported(String),
}

/// A solvable instance: market parameters, population, and the constraint
/// toggles selecting which families enter the program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub params: MarketParams,
    pub population: Population,
    /// Grid size used to discretize a uniform population.
    pub grid: usize,
    /// Consumer truth-telling constraints (off = the broker observes types).
    pub consumer_ic: bool,
    /// Seller obedience constraints (off = the broker dictates prices).
    pub obedience: bool,
    /// Require consumer fees to be nonnegative.
    pub fee_nonneg: bool,
    pub tolerance: f64,
}

impl ScenarioSpec {
    pub fn new(params: MarketParams, population: Population) -> Self {
        ScenarioSpec {
            params,
            population,
            grid: 50,
            consumer_ic: true,
            obedience: true,
            fee_nonneg: true,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn with_toggles(mut self, consumer_ic: bool, obedience: bool) -> Self {
        self.consumer_ic = consumer_ic;
        self.obedience = obedience;
        self
    }

    pub fn with_grid(mut self, grid: usize) -> Self {
        self.grid = grid;
        self
    }

    /// The finite type list the oracle actually solves: discrete populations
    /// verbatim, uniform populations discretized.
    pub fn types(&self) -> Result<Vec<ConsumerType>, OracleError> {
        match &self.population {
            Population::Discrete(types) => {
                validate_types(types)?;
                Ok(types.clone())
            }
            Population::Uniform => {
                if self.grid < 2 {
                    return Err(OracleError::GridTooSmall(self.grid));
                }
                Ok(discretize_uniform(&self.params, self.grid).types)
            }
        }
    }
}

/// A uniform population discretized into contiguous cells: types sit at cell
/// midpoints and carry the cell width as mass.
#[derive(Debug, Clone)]
pub struct UniformGrid {
    pub types: Vec<ConsumerType>,
    /// Cell edges; `edges.len() == types.len() + 1`.
    pub edges: Vec<f64>,
}

/// Discretizes the uniform population into `n` midpoint cells whose edges
/// include every interior segment boundary, so segment masses are exact and
/// the sparse-support structure of optimal designs stays representable. When
/// the boundaries align with the even grid this is exactly the
/// equally-weighted midpoint grid with mass `1/n`.
pub fn discretize_uniform(params: &MarketParams, n: usize) -> UniformGrid {
    let mut cuts: Vec<f64> = segment_boundaries(params)
        .into_iter()
        .filter(|&c| c > 1e-12 && c < 1.0 - 1e-12)
        .collect();
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut anchors = vec![0.0];
    anchors.extend(cuts);
    anchors.push(1.0);

    let segments = anchors.len() - 1;
    let n = n.max(segments);
    let widths: Vec<f64> = anchors.windows(2).map(|w| w[1] - w[0]).collect();
    // Largest-remainder allocation of n cells across segments, at least one
    // cell per segment.
    let mut counts: Vec<usize> = widths.iter().map(|w| ((n as f64) * w).floor() as usize).collect();
    for c in counts.iter_mut() {
        *c = (*c).max(1);
    }
    let mut assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = widths
        .iter()
        .enumerate()
        .map(|(k, w)| (k, (n as f64) * w - counts[k] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut cursor = 0;
    while assigned < n {
        counts[remainders[cursor % remainders.len()].0] += 1;
        assigned += 1;
        cursor += 1;
    }
    while assigned > n {
        // Shrink the segment currently holding the most cells per width.
        let k = (0..segments)
            .filter(|&k| counts[k] > 1)
            .max_by(|&a, &b| {
                let ra = counts[a] as f64 / widths[a];
                let rb = counts[b] as f64 / widths[b];
                ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
            })
            .expect("at least one shrinkable segment");
        counts[k] -= 1;
        assigned -= 1;
    }

    let mut edges = Vec::with_capacity(n + 1);
    let mut types = Vec::with_capacity(n);
    edges.push(0.0);
    for k in 0..segments {
        let w = widths[k] / counts[k] as f64;
        for i in 0..counts[k] {
            let left = anchors[k] + w * i as f64;
            let right = if i + 1 == counts[k] { anchors[k + 1] } else { left + w };
            types.push(ConsumerType { location: 0.5 * (left + right), mass: right - left });
            edges.push(right);
        }
    }
    UniformGrid { types, edges }
}

/// Which constraint a report record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintFamily {
    /// Per-type signal distribution sums to one.
    SignalSimplex { type_idx: usize },
    /// Per-type signal probabilities are nonnegative (smallest entry).
    SignalNonneg { type_idx: usize },
    /// Consumer `from` weakly prefers truth over reporting `to`.
    ConsumerIc { from: usize, to: usize },
    ConsumerIr { type_idx: usize },
    Obedience { seller: SellerId, recommended: PriceLevel },
    SellerIr { seller: SellerId },
    ConsumerFeeNonneg { type_idx: usize },
    SellerFeeNonneg { seller: SellerId },
}

impl ConstraintFamily {
    /// Coarse family grouping used in reports.
    pub fn group(&self) -> &'static str {
        match self {
            ConstraintFamily::ConsumerIc { .. } => "IC",
            ConstraintFamily::ConsumerIr { .. } => "consumerIR",
            ConstraintFamily::Obedience { .. } => "obedience",
            ConstraintFamily::SellerIr { .. } => "sellerIR",
            _ => "simplex-internal",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ConstraintFamily::SignalSimplex { type_idx } => format!("signal-sum[{type_idx}]"),
            ConstraintFamily::SignalNonneg { type_idx } => format!("signal-nonneg[{type_idx}]"),
            ConstraintFamily::ConsumerIc { from, to } => format!("IC[{from}->{to}]"),
            ConstraintFamily::ConsumerIr { type_idx } => format!("IR[{type_idx}]"),
            ConstraintFamily::Obedience { seller, recommended } => {
                let s = if *seller == SellerId::S1 { 1 } else { 2 };
                let p = if *recommended == PriceLevel::High { "H" } else { "L" };
                format!("obedience[S{s},{p}]")
            }
            ConstraintFamily::SellerIr { seller } => {
                format!("sellerIR[S{}]", if *seller == SellerId::S1 { 1 } else { 2 })
            }
            ConstraintFamily::ConsumerFeeNonneg { type_idx } => format!("fee-nonneg[{type_idx}]"),
            ConstraintFamily::SellerFeeNonneg { seller } => {
                format!("seller-fee-nonneg[S{}]", if *seller == SellerId::S1 { 1 } else { 2 })
            }
        }
    }
}

/// One audited constraint: signed slack (nonnegative = satisfied) and the
/// scale used for relative binding detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub family: ConstraintFamily,
    pub slack: f64,
    pub scale: f64,
}

/// Full first-principles audit of a mechanism against a scenario's
/// constraint set, in deterministic generation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub records: Vec<ConstraintRecord>,
    pub tolerance: f64,
}

/// Binding means `|slack| <= 1e-7 * max(1, |rhs|)`. The paper never states a
/// tolerance for "binding"; this is a repo convention.
pub const BINDING_RELATIVE_TOLERANCE: f64 = 1e-7;

impl ConstraintReport {
    pub fn violations(&self) -> Vec<&ConstraintRecord> {
        self.records.iter().filter(|r| r.slack < -self.tolerance).collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.records.iter().all(|r| r.slack >= -self.tolerance)
    }

    pub fn worst_slack(&self) -> f64 {
        self.records.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
    }

    /// Constraints holding with equality, grouped in generation order.
    pub fn binding_records(&self) -> Vec<&ConstraintRecord> {
        self.records
            .iter()
            .filter(|r| r.slack.abs() <= BINDING_RELATIVE_TOLERANCE * r.scale.max(1.0))
            .collect()
    }

    pub fn find(&self, family: ConstraintFamily) -> Option<&ConstraintRecord> {
        self.records.iter().find(|r| r.family == family)
    }
}

/// Program rows annotated with their families, aligned with
/// `program.constraints`.
pub struct BuiltProgram {
    pub program: LinearProgram,
    pub families: Vec<ConstraintFamily>,
    pub num_types: usize,
}

impl BuiltProgram {
    pub fn pi_col(&self, type_idx: usize, signal: PriceSignal) -> usize {
        4 * type_idx + signal.index()
    }

    pub fn fee_col(&self, type_idx: usize) -> usize {
        4 * self.num_types + type_idx
    }

    pub fn seller_fee_col(&self, seller: SellerId) -> usize {
        5 * self.num_types + if seller == SellerId::S1 { 0 } else { 1 }
    }
}

/// Builds the broker's program over a finite type list.
///
/// Variables: `pi(s|x_i)` for the four signals per type, one consumer fee per
/// type, and the two seller fees. The purchase indicators are parameter
/// determined, so every constraint is linear.
pub fn build_program(
    scenario: &ScenarioSpec,
    types: &[ConsumerType],
) -> Result<BuiltProgram, OracleError> {
    validate_types(types)?;
    let params = &scenario.params;
    let n = types.len();
    let num_vars = 5 * n + 2;

    let mut objective = vec![0.0; num_vars];
    for (i, ty) in types.iter().enumerate() {
        objective[4 * n + i] = ty.mass;
    }
    objective[5 * n] = 1.0;
    objective[5 * n + 1] = 1.0;

    let mut lp = LinearProgram::new(objective);
    lp.names = Vec::with_capacity(num_vars);
    for i in 0..n {
        for s in ["HH", "HL", "LH", "LL"] {
            lp.names.push(format!("pi[{s}|{i}]"));
        }
    }
    for i in 0..n {
        lp.names.push(format!("mc[{i}]"));
    }
    lp.names.push("m1".into());
    lp.names.push("m2".into());
    if !scenario.fee_nonneg {
        for i in 0..n {
            lp.bounds[4 * n + i] = Bounds::FREE;
        }
    }

    let mut families = Vec::new();

    // Per-type signal distributions.
    for i in 0..n {
        let mut row = vec![0.0; num_vars];
        for s in PriceSignal::ALL {
            row[4 * i + s.index()] = 1.0;
        }
        lp.add_constraint(row, Relation::Eq, 1.0);
        families.push(ConstraintFamily::SignalSimplex { type_idx: i });
    }

    // Misreport inequalities for all ordered type pairs.
    if scenario.consumer_ic {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut row = vec![0.0; num_vars];
                for s in PriceSignal::ALL {
                    let u = signal_utility(types[i].location, s, params);
                    row[4 * i + s.index()] += u;
                    row[4 * j + s.index()] -= u;
                }
                row[4 * n + i] -= 1.0;
                row[4 * n + j] += 1.0;
                lp.add_constraint(row, Relation::Ge, 0.0);
                families.push(ConstraintFamily::ConsumerIc { from: i, to: j });
            }
        }
    }

    // Consumer participation.
    for i in 0..n {
        let mut row = vec![0.0; num_vars];
        for s in PriceSignal::ALL {
            row[4 * i + s.index()] = signal_utility(types[i].location, s, params);
        }
        row[4 * n + i] = -1.0;
        lp.add_constraint(row, Relation::Ge, 0.0);
        families.push(ConstraintFamily::ConsumerIr { type_idx: i });
    }

    // Obedience: per seller and recommended price, one alternative price,
    // with the purchase indicator re-evaluated at the deviation.
    if scenario.obedience {
        for seller in SellerId::BOTH {
            for rec in PriceLevel::BOTH {
                let dev = rec.other();
                let mut row = vec![0.0; num_vars];
                for (i, ty) in types.iter().enumerate() {
                    for s in PriceSignal::ALL {
                        if s.seller_level(seller) != rec {
                            continue;
                        }
                        let mut coef = 0.0;
                        let on_path = purchase(ty.location, s, params);
                        if on_path.chosen_seller == seller {
                            coef += on_path.paid_price;
                        }
                        let off_path = purchase(ty.location, s.with_seller_level(seller, dev), params);
                        if off_path.chosen_seller == seller {
                            coef -= off_path.paid_price;
                        }
                        row[4 * i + s.index()] += ty.mass * coef;
                    }
                }
                lp.add_constraint(row, Relation::Ge, 0.0);
                families.push(ConstraintFamily::Obedience { seller, recommended: rec });
            }
        }
    }

    // Seller participation: the fee cannot exceed the seller's expected
    // revenue under the scheme.
    for seller in SellerId::BOTH {
        let mut row = vec![0.0; num_vars];
        for (i, ty) in types.iter().enumerate() {
            for s in PriceSignal::ALL {
                let outcome = purchase(ty.location, s, params);
                if outcome.chosen_seller == seller {
                    row[4 * i + s.index()] += ty.mass * outcome.paid_price;
                }
            }
        }
        row[5 * n + if seller == SellerId::S1 { 0 } else { 1 }] = -1.0;
        lp.add_constraint(row, Relation::Ge, 0.0);
        families.push(ConstraintFamily::SellerIr { seller });
    }

    Ok(BuiltProgram { program: lp, families, num_types: n })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverStats {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
}

/// An LP optimum assembled back into model terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub types: Vec<ConsumerType>,
    pub mechanism: Mechanism,
    pub revenue: f64,
    pub consumer_payoffs: Vec<f64>,
    pub seller_payoffs: (f64, f64),
    pub binding: ConstraintReport,
    pub stats: SolverStats,
}

impl SolveResult {
    /// `pi(LL | x_i)`, the probability the second-segment analysis tracks.
    pub fn ll_probability(&self, type_idx: usize) -> f64 {
        self.mechanism.signal_probability(type_idx, PriceSignal::LL)
    }
}

/// Maps an optimal scheme to its canonical sparse-support representative in
/// the asymmetric market. These are the standard revenue-preserving
/// transformations: `(L,H)` folds into `(L,L)` for every type (identical
/// best response, payment, and obedience contributions), and below the
/// segment boundary `(H,L)` folds into `(H,H)` and `(L,L)` moves to `(H,H)`
/// (the fee difference is compensated and seller 1's obedience only
/// relaxes). Fees must be re-derived afterwards; `solve` does so via
/// [`max_extraction_fees`].
pub fn canonicalize_dominant(mech: &mut Mechanism, types: &[ConsumerType], params: &MarketParams) {
    if params.variant() != Variant::Asymmetric {
        return;
    }
    let cut = params.lower_boundary();
    for (ty, row) in types.iter().zip(mech.scheme.iter_mut()) {
        row[PriceSignal::LL.index()] += row[PriceSignal::LH.index()];
        row[PriceSignal::LH.index()] = 0.0;
        if ty.location <= cut {
            row[PriceSignal::HH.index()] += row[PriceSignal::HL.index()];
            row[PriceSignal::HL.index()] = 0.0;
            row[PriceSignal::HH.index()] += row[PriceSignal::LL.index()];
            row[PriceSignal::LL.index()] = 0.0;
        }
    }
}

/// Re-evaluates every scenario constraint on a mechanism from first
/// principles (model primitives, not LP rows).
pub fn audit_mechanism(
    scenario: &ScenarioSpec,
    types: &[ConsumerType],
    mech: &Mechanism,
) -> Result<ConstraintReport, OracleError> {
    validate_types(types)?;
    if mech.scheme.len() != types.len() {
        return Err(OracleError::Model(ModelError::MechanismShape(format!(
            "{} scheme rows vs {} types",
            mech.scheme.len(),
            types.len()
        ))));
    }
    let params = &scenario.params;
    let n = types.len();
    let mut records = Vec::new();

    let utilities: Vec<f64> = (0..n)
        .map(|i| expected_utility_under_row(types[i].location, &mech.scheme[i], params))
        .collect();

    for (i, row) in mech.scheme.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        records.push(ConstraintRecord {
            family: ConstraintFamily::SignalSimplex { type_idx: i },
            slack: -(sum - 1.0).abs(),
            scale: 1.0,
        });
        let min_entry = row.iter().cloned().fold(f64::INFINITY, f64::min);
        records.push(ConstraintRecord {
            family: ConstraintFamily::SignalNonneg { type_idx: i },
            slack: min_entry,
            scale: 1.0,
        });
    }

    if scenario.consumer_ic {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let misreport =
                    expected_utility_under_row(types[i].location, &mech.scheme[j], params);
                let slack = (utilities[i] - mech.consumer_fees[i])
                    - (misreport - mech.consumer_fees[j]);
                records.push(ConstraintRecord {
                    family: ConstraintFamily::ConsumerIc { from: i, to: j },
                    slack,
                    scale: 1.0,
                });
            }
        }
    }

    for i in 0..n {
        records.push(ConstraintRecord {
            family: ConstraintFamily::ConsumerIr { type_idx: i },
            slack: utilities[i] - mech.consumer_fees[i],
            scale: 1.0,
        });
    }

    if scenario.obedience {
        for seller in SellerId::BOTH {
            for rec in PriceLevel::BOTH {
                let slack = obedience_slack(seller, rec, rec.other(), mech, types, params);
                records.push(ConstraintRecord {
                    family: ConstraintFamily::Obedience { seller, recommended: rec },
                    slack,
                    scale: 1.0,
                });
            }
        }
    }

    for seller in SellerId::BOTH {
        let u = seller_expected_revenue(seller, mech, types, params);
        let fee = if seller == SellerId::S1 { mech.seller_fees.0 } else { mech.seller_fees.1 };
        records.push(ConstraintRecord {
            family: ConstraintFamily::SellerIr { seller },
            slack: u - fee,
            scale: 1.0,
        });
        records.push(ConstraintRecord {
            family: ConstraintFamily::SellerFeeNonneg { seller },
            slack: fee,
            scale: 1.0,
        });
    }

    if scenario.fee_nonneg {
        for (i, &fee) in mech.consumer_fees.iter().enumerate() {
            records.push(ConstraintRecord {
                family: ConstraintFamily::ConsumerFeeNonneg { type_idx: i },
                slack: fee,
                scale: 1.0,
            });
        }
    }

    Ok(ConstraintReport { records, tolerance: scenario.tolerance })
}

/// Solves the scenario's program and assembles the optimum into model terms.
///
/// Infeasible or Unbounded statuses are hard errors: the broker program
/// always has feasible points and a bounded objective, so either status
/// indicates a construction bug, never a property of the instance.
pub fn solve(scenario: &ScenarioSpec) -> Result<SolveResult, OracleError> {
    let types = scenario.types()?;
    let built = build_program(scenario, &types)?;
    let solution = simplex::solve(&built.program)?;
    if solution.status != SolveStatus::Optimal {
        return Err(OracleError::UnexpectedStatus(solution.status));
    }

    let n = types.len();
    let snap = |v: f64| {
        if v.abs() < 1e-11 {
            0.0
        } else if (v - 1.0).abs() < 1e-11 {
            1.0
        } else {
            v
        }
    };
    let mut scheme = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = [0.0; 4];
        for s in PriceSignal::ALL {
            row[s.index()] = snap(solution.primal[built.pi_col(i, s)]);
        }
        scheme.push(row);
    }
    let consumer_fees: Vec<f64> = (0..n).map(|i| snap(solution.primal[built.fee_col(i)])).collect();
    let seller_fees = (
        snap(solution.primal[built.seller_fee_col(SellerId::S1)]),
        snap(solution.primal[built.seller_fee_col(SellerId::S2)]),
    );
    let mut mechanism = Mechanism { scheme, consumer_fees, seller_fees };
    canonicalize_dominant(&mut mechanism, &types, &scenario.params);
    // Scrub solver roundoff: row sums a hair off one get multiplied by
    // V-scale utilities otherwise.
    for row in mechanism.scheme.iter_mut() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() < 1e-6 && sum != 1.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        for v in row.iter_mut() {
            *v = snap(*v);
        }
    }
    // At an optimum the fees are exactly the maximal extraction for the
    // chosen scheme; re-deriving them through the fixpoint clears solver
    // roundoff and restores the fees the canonical scheme supports.
    if let Some((fees, _)) = max_extraction_fees(
        &types,
        &mechanism.scheme,
        &scenario.params,
        scenario.consumer_ic,
        scenario.fee_nonneg,
    ) {
        mechanism.consumer_fees = fees;
        mechanism.seller_fees = (
            seller_expected_revenue(SellerId::S1, &mechanism, &types, &scenario.params),
            seller_expected_revenue(SellerId::S2, &mechanism, &types, &scenario.params),
        );
    }

    let consumer_payoffs: Vec<f64> = (0..n)
        .map(|i| {
            expected_utility_under_row(types[i].location, &mechanism.scheme[i], &scenario.params)
                - mechanism.consumer_fees[i]
        })
        .collect();
    let seller_payoffs = (
        seller_expected_revenue(SellerId::S1, &mechanism, &types, &scenario.params)
            - mechanism.seller_fees.0,
        seller_expected_revenue(SellerId::S2, &mechanism, &types, &scenario.params)
            - mechanism.seller_fees.1,
    );
    let binding = audit_mechanism(scenario, &types, &mechanism)?;

    let revenue = mechanism.revenue(&types);
    debug_assert!(
        (revenue - solution.objective_value).abs() <= 1e-6 * revenue.abs().max(1.0),
        "polished revenue {} drifted from LP objective {}",
        revenue,
        solution.objective_value
    );

    Ok(SolveResult {
        types,
        mechanism,
        revenue,
        consumer_payoffs,
        seller_payoffs,
        binding,
        stats: SolverStats {
            rows: built.program.constraints.len(),
            cols: built.program.num_vars(),
            iterations: solution.iterations,
        },
    })
}

/// Maximal fees extractable from consumers for a fixed signal scheme, via the
/// least fixpoint of the misreport-gain system (Bellman-Ford over the
/// complete misreport graph). Independent of the simplex path.
///
/// Returns `(fees, payoffs)` or `None` when no fee vector satisfies the
/// scenario's IC/IR/fee-sign constraints for this scheme.
pub fn max_extraction_fees(
    types: &[ConsumerType],
    scheme: &[[f64; 4]],
    params: &MarketParams,
    consumer_ic: bool,
    fee_nonneg: bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = types.len();
    let utilities: Vec<f64> = (0..n)
        .map(|i| expected_utility_under_row(types[i].location, &scheme[i], params))
        .collect();
    let mut payoffs = vec![0.0; n];
    if consumer_ic {
        // gains[i][j]: payoff of i pretending to be j, before fees, relative
        // to j's truthful utility.
        let mut gains = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let mis = expected_utility_under_row(types[i].location, &scheme[j], params);
                    gains[i * n + j] = mis - utilities[j];
                }
            }
        }
        let scale = utilities.iter().fold(1.0f64, |m, u| m.max(u.abs()));
        let converged = 1e-12 * scale;
        let mut rounds = 0usize;
        loop {
            let mut max_improvement = 0.0f64;
            for i in 0..n {
                let mut best = 0.0f64;
                for j in 0..n {
                    if i != j {
                        best = best.max(payoffs[j] + gains[i * n + j]);
                    }
                }
                if best > payoffs[i] {
                    max_improvement = max_improvement.max(best - payoffs[i]);
                    payoffs[i] = best;
                }
            }
            rounds += 1;
            if max_improvement <= converged {
                break;
            }
            if rounds > n + 2 {
                // Still improving materially after the longest simple path:
                // a positive misreport cycle makes every fee vector
                // IC-infeasible. Roundoff-sized cycles are tolerated.
                if max_improvement > 1e-9 * scale {
                    return None;
                }
                break;
            }
        }
    }
    let fees: Vec<f64> = utilities.iter().zip(&payoffs).map(|(u, g)| u - g).collect();
    if fee_nonneg && fees.iter().any(|&f| f < -1e-12) {
        return None;
    }
    Some((fees, payoffs))
}

/// Discrepancy found by the brute-force grid check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub kind: CounterexampleKind,
    pub lp_revenue: f64,
    pub grid_best: f64,
    pub resolution_bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterexampleKind {
    /// A feasible gridded mechanism beats the LP value: the LP lost revenue.
    GridBeatsLp,
    /// The LP value exceeds the exhaustive grid envelope by more than the
    /// resolution bound: the LP is missing constraints.
    LpExceedsGridEnvelope,
}

/// Exhaustively grids the reduced mechanism space of a small asymmetric
/// instance and checks the LP optimum against the grid maximum in both
/// directions.
pub fn brute_force_verify(
    scenario: &ScenarioSpec,
    grid_steps: usize,
) -> Result<Option<Counterexample>, OracleError> {
    let lp_revenue = solve(scenario)?.revenue;
    verify_value_against_grid(scenario, grid_steps, lp_revenue)
}

/// Grid check against an externally supplied candidate optimum (used by the
/// loosened-LP negative control).
pub fn verify_value_against_grid(
    scenario: &ScenarioSpec,
    grid_steps: usize,
    candidate: f64,
) -> Result<Option<Counterexample>, OracleError> {
    let (grid_best, resolution_bound) = grid_maximum(scenario, grid_steps)?;
    let outcome = if grid_best > candidate + 1e-6 {
        Some(Counterexample {
            kind: CounterexampleKind::GridBeatsLp,
            lp_revenue: candidate,
            grid_best,
            resolution_bound,
            margin: grid_best - candidate,
        })
    } else if candidate > grid_best + resolution_bound + 1e-6 {
        Some(Counterexample {
            kind: CounterexampleKind::LpExceedsGridEnvelope,
            lp_revenue: candidate,
            grid_best,
            resolution_bound,
            margin: candidate - grid_best - resolution_bound,
        })
    } else {
        None
    };
    Ok(outcome)
}

/// Maximum broker revenue over the gridded reduced mechanism space, plus a
/// Lipschitz bound on how far the true optimum can sit above it.
///
/// The reduction uses the sparse-support structure of asymmetric optima:
/// types below the segment boundary are offered `(H,H)`, types above mix
/// `(L,L)` against `(H,L)`, so one probability per second-segment type spans
/// the space. Fees are the maximal extraction for each gridded scheme.
pub fn grid_maximum(
    scenario: &ScenarioSpec,
    grid_steps: usize,
) -> Result<(f64, f64), OracleError> {
    if scenario.params.variant() != Variant::Asymmetric {
        return Err(OracleError::Unsupported(
            "brute-force grid reduction relies on the asymmetric sparse-support structure".into(),
        ));
    }
    if grid_steps < 2 || grid_steps > 21 {
        return Err(OracleError::InstanceTooLarge(format!(
            "grid_steps must be in [2, 21], got {grid_steps}"
        )));
    }
    let types = scenario.types()?;
    let params = &scenario.params;
    let cut = params.lower_boundary();
    let free: Vec<usize> = (0..types.len()).filter(|&i| types[i].location > cut).collect();
    if free.len() > 2 || types.len() > 3 {
        return Err(OracleError::InstanceTooLarge(format!(
            "{} types with {} above the boundary; the exhaustive grid handles at most 3 and 2",
            types.len(),
            free.len()
        )));
    }

    let delta = 1.0 / (grid_steps - 1) as f64;
    let h = params.high_price();
    let l = params.low_price();
    let t = params.transport_cost();
    // Per free coordinate: own-fee sensitivity plus the largest misreport
    // edge sensitivity, times one grid step.
    let resolution_bound: f64 = free
        .iter()
        .map(|&k| {
            let own = types[k].mass * 2.0 * t * (1.0 - types[k].location);
            let edge = (2.0 * t).max(h - l) + 2.0 * t * (1.0 - types[k].location);
            delta * (own + edge)
        })
        .sum();

    let mut scheme: Vec<[f64; 4]> = types
        .iter()
        .map(|ty| {
            if ty.location <= cut {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 0.0, 1.0]
            }
        })
        .collect();

    let mut best = f64::NEG_INFINITY;
    let combos = (grid_steps as u64).pow(free.len() as u32);
    for combo in 0..combos {
        let mut rest = combo;
        for &k in &free {
            let step = (rest % grid_steps as u64) as f64;
            rest /= grid_steps as u64;
            let y = (step * delta).min(1.0);
            scheme[k][PriceSignal::LL.index()] = y;
            scheme[k][PriceSignal::HL.index()] = 1.0 - y;
        }
        let probe = Mechanism {
            scheme: scheme.clone(),
            consumer_fees: vec![0.0; types.len()],
            seller_fees: (0.0, 0.0),
        };
        if scenario.obedience {
            let obedient = SellerId::BOTH.iter().all(|&seller| {
                PriceLevel::BOTH.iter().all(|&rec| {
                    obedience_slack(seller, rec, rec.other(), &probe, &types, params) >= -1e-12
                })
            });
            if !obedient {
                continue;
            }
        }
        let Some((fees, _)) = max_extraction_fees(
            &types,
            &scheme,
            params,
            scenario.consumer_ic,
            scenario.fee_nonneg,
        ) else {
            continue;
        };
        let u1 = seller_expected_revenue(SellerId::S1, &probe, &types, params);
        let u2 = seller_expected_revenue(SellerId::S2, &probe, &types, params);
        let revenue: f64 = u1
            + u2
            + types.iter().zip(&fees).map(|(ty, f)| ty.mass * f).sum::<f64>();
        if revenue > best {
            best = revenue;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(OracleError::Unsupported(
            "no gridded mechanism was feasible for this scenario".into(),
        ));
    }
    Ok((best, resolution_bound))
}

/// Convenience: total gross surplus when every consumer buys from the
/// efficient seller.
pub fn first_best_surplus(params: &MarketParams, types: &[ConsumerType]) -> f64 {
    types
        .iter()
        .map(|ty| {
            let s1 = params.gross_value_1() - ty.location * params.transport_cost();
            match params.variant() {
                Variant::Asymmetric => ty.mass * s1,
                Variant::Symmetric => {
                    let s2 =
                        params.gross_value_2() - (1.0 - ty.location) * params.transport_cost();
                    ty.mass * s1.max(s2)
                }
            }
        })
        .sum()
}

pub use model::Mechanism as OracleMechanism;

#[cfg(test)]
mod tests {
    use super::*;

    fn asym(v: f64, t: f64, h: f64, l: f64) -> MarketParams {
        MarketParams::asymmetric(v, t, h, l).unwrap()
    }

    /// Example instance: a heavy first-segment type and two light types in
    /// the second segment.
    fn example1_scenario() -> ScenarioSpec {
        let params = asym(1000.0, 1.0, 10.0, 9.0);
        let population = Population::discrete(vec![
            ConsumerType { location: 0.375, mass: 0.9 },
            ConsumerType { location: 4.0 / 6.0, mass: 0.05 },
            ConsumerType { location: 5.0 / 6.0, mass: 0.05 },
        ])
        .unwrap();
        ScenarioSpec::new(params, population)
    }

    #[test]
    fn program_shape_for_three_types() {
        let scenario = example1_scenario();
        let types = scenario.types().unwrap();
        let built = build_program(&scenario, &types).unwrap();
        assert_eq!(built.program.num_vars(), 17); // 12 pi + 3 fees + 2 seller fees
        let count = |group: &str| {
            built
                .families
                .iter()
                .filter(|f| f.group() == group)
                .count()
        };
        assert_eq!(count("IC"), 6);
        assert_eq!(count("consumerIR"), 3);
        assert_eq!(count("obedience"), 4);
        assert_eq!(count("sellerIR"), 2);
        assert_eq!(count("simplex-internal"), 3); // signal-sum rows
    }

    #[test]
    fn example1_optimum_matches_reduced_form_hand_solution() {
        // Hand-derived optimum of the reduced program (support structure
        // fixed, fees eliminated): y2 = y3 = 1/8, x2's participation binds,
        // x3 keeps payoff 1/8, and revenue is 999.5375.
        let scenario = example1_scenario();
        let result = solve(&scenario).unwrap();
        assert!((result.ll_probability(1) - 0.125).abs() < 1e-9, "y2 = {}", result.ll_probability(1));
        assert!((result.ll_probability(2) - 0.125).abs() < 1e-9, "y3 = {}", result.ll_probability(2));
        assert!((result.revenue - 999.5375).abs() < 1e-9);
        assert!((result.mechanism.consumer_fees[0] - 989.625).abs() < 1e-9);
        assert!((result.mechanism.consumer_fees[1] - 989.75).abs() < 1e-9);
        assert!((result.mechanism.consumer_fees[2] - 989.75).abs() < 1e-9);
        assert!(result.consumer_payoffs[1].abs() < 1e-9);
        assert!((result.consumer_payoffs[2] - 0.125).abs() < 1e-9);
        // The audit re-derives every slack from the model primitives.
        assert!(result.binding.is_feasible());
        let x2_ir = result
            .binding
            .find(ConstraintFamily::ConsumerIr { type_idx: 1 })
            .unwrap();
        assert!(x2_ir.slack.abs() <= 1e-7);
        let x3_ir = result
            .binding
            .find(ConstraintFamily::ConsumerIr { type_idx: 2 })
            .unwrap();
        assert!(x3_ir.slack > 1e-4);
    }

    #[test]
    fn ic_off_reaches_full_extraction() {
        let mut scenario = example1_scenario();
        scenario.consumer_ic = false;
        let result = solve(&scenario).unwrap();
        let types = scenario.types().unwrap();
        let fb = first_best_surplus(&scenario.params, &types);
        assert!((result.revenue - fb).abs() < 1e-9);
        for p in &result.consumer_payoffs {
            assert!(p.abs() < 1e-9);
        }
        assert!(result.seller_payoffs.0.abs() < 1e-9);
        assert!(result.seller_payoffs.1.abs() < 1e-9);
    }

    #[test]
    fn constraint_nesting_orders_revenue() {
        let base = example1_scenario();
        let no_ic = {
            let mut s = base.clone();
            s.consumer_ic = false;
            solve(&s).unwrap().revenue
        };
        let ic_only = {
            let mut s = base.clone();
            s.obedience = false;
            solve(&s).unwrap().revenue
        };
        let full = solve(&base).unwrap().revenue;
        assert!(no_ic >= ic_only - 1e-9);
        assert!(ic_only >= full - 1e-9);
    }

    #[test]
    fn uniform_grid_inserts_boundary_and_preserves_mass() {
        let params = asym(1000.0, 1.0, 10.0, 9.0); // boundary at 0.5
        for n in [10usize, 25, 50] {
            let grid = discretize_uniform(&params, n);
            assert_eq!(grid.types.len(), n);
            let total: f64 = grid.types.iter().map(|t| t.mass).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(grid.edges.iter().any(|&e| (e - 0.5).abs() < 1e-12));
            let below: f64 = grid
                .types
                .iter()
                .filter(|t| t.location < 0.5)
                .map(|t| t.mass)
                .sum();
            assert!((below - 0.5).abs() < 1e-12, "n = {n}, below = {below}");
        }
        // Odd split that does not align with the even grid.
        let params = asym(1000.0, 6.0, 12.0, 9.0); // boundary at 0.75
        let grid = discretize_uniform(&params, 10);
        assert_eq!(grid.types.len(), 10);
        let below: f64 = grid.types.iter().filter(|t| t.location < 0.75).map(|t| t.mass).sum();
        assert!((below - 0.75).abs() < 1e-12);
    }

    #[test]
    fn max_extraction_respects_ic_chain() {
        let params = asym(1000.0, 1.0, 10.0, 9.0);
        let types = vec![
            ConsumerType { location: 0.3, mass: 0.5 },
            ConsumerType { location: 0.7, mass: 0.5 },
        ];
        // First segment (H,H), second segment pure (L,L).
        let scheme = vec![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let (fees, payoffs) = max_extraction_fees(&types, &scheme, &params, true, true).unwrap();
        // The second type is fully extracted; the first keeps the rent from
        // imitating it, (x2 - x1) t, because a deviator to the (L,L) package
        // pays the second type's fee but saves transport.
        let u1 = 1000.0 - 0.3 - 10.0;
        let u2 = 1000.0 - 0.7 - 9.0;
        assert!((fees[1] - u2).abs() < 1e-12);
        assert!((payoffs[0] - 0.4).abs() < 1e-12);
        assert!((fees[0] - (u1 - 0.4)).abs() < 1e-12);
        // Without IC both fees extract fully.
        let (fees, _) = max_extraction_fees(&types, &scheme, &params, false, true).unwrap();
        assert!((fees[0] - u1).abs() < 1e-12);
        assert!((fees[1] - u2).abs() < 1e-12);
    }

    #[test]
    fn grid_agrees_with_lp_on_small_instances() {
        // Single type below the boundary.
        let params = asym(1000.0, 1.0, 10.0, 9.0);
        let single = ScenarioSpec::new(
            params,
            Population::discrete(vec![ConsumerType { location: 1.0, mass: 1.0 }]).unwrap(),
        );
        assert!(brute_force_verify(&single, 21).unwrap().is_none());

        // Two types straddling the boundary.
        let two = ScenarioSpec::new(
            params,
            Population::discrete(vec![
                ConsumerType { location: 0.3, mass: 0.6 },
                ConsumerType { location: 0.8, mass: 0.4 },
            ])
            .unwrap(),
        );
        assert!(brute_force_verify(&two, 21).unwrap().is_none());
    }

    #[test]
    fn loosened_lp_is_caught_by_the_grid() {
        // A narrow price spread keeps seller 1's obedience floor on y high,
        // so the first type's misreport rent cannot be squeezed away and the
        // dropped IC row is worth far more than the grid resolution.
        let params = asym(100.0, 3.0, 10.0, 9.5);
        let scenario = ScenarioSpec::new(
            params,
            Population::discrete(vec![
                ConsumerType { location: 0.1, mass: 0.5 },
                ConsumerType { location: 0.96, mass: 0.5 },
            ])
            .unwrap(),
        );
        let types = scenario.types().unwrap();
        let built = build_program(&scenario, &types).unwrap();
        let mut loosened = built.program.clone();
        let drop_idx = built
            .families
            .iter()
            .position(|f| matches!(f, ConstraintFamily::ConsumerIc { from: 0, to: 1 }))
            .unwrap();
        loosened.constraints.remove(drop_idx);
        let value = simplex::solve(&loosened).unwrap().objective_value;
        let counter = verify_value_against_grid(&scenario, 21, value).unwrap();
        let counter = counter.expect("dropping the binding IC row must be detected");
        assert_eq!(counter.kind, CounterexampleKind::LpExceedsGridEnvelope);
        // The honest LP passes the same check.
        assert!(brute_force_verify(&scenario, 21).unwrap().is_none());
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let params = asym(1000.0, 1.0, 10.0, 9.0);
        let scenario = ScenarioSpec::new(
            params,
            Population::discrete(vec![
                ConsumerType { location: 0.55, mass: 0.3 },
                ConsumerType { location: 0.65, mass: 0.3 },
                ConsumerType { location: 0.85, mass: 0.4 },
            ])
            .unwrap(),
        );
        assert!(matches!(
            grid_maximum(&scenario, 11),
            Err(OracleError::InstanceTooLarge(_))
        ));
    }
}
