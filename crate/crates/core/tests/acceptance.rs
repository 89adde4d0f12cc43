//! Acceptance criteria 1 to 11, one PASS/FAIL line each.
//!
//! `cargo test -p molmask --test acceptance` runs everything (about half an
//! hour on one core). Pass criterion numbers to run a subset:
//! `cargo test -p molmask --test acceptance -- 1 2 3 4 5 11`.
//!
//! The process exits nonzero when a criterion fails that is not listed in
//! [`KNOWN_RED`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use molmask::chem::{parse_smiles, ParseErrorKind};
use molmask::dataset::{split, synth_generate, CategoryStats, CategorySpace, Dataset, SynthConfig};
use molmask::encoder::{Encoder, EncoderConfig, Mode, PreparedGraph};
use molmask::imbalance::{
    compute_weights, cross_entropy, cross_entropy_with_logits, softmax, weight_derivative, Reduction, WeightScheme,
};
use molmask::metrics::{convergence_epoch, evaluate_recall, GroupSpec, RecallReport};
use molmask::pipeline::{
    cell_file_name, cell_seeds, evaluate_mae, pretrain_prepared, run_grid_prepared, GridConfig, GridReport, LossLog,
    MaskMode, Seeds, TrainConfig, TrainingData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to print FAIL, each with a written analysis in the
/// README's "Known deviations" section.
const KNOWN_RED: &[u8] = &[4];

const EPS: f64 = 1e-7;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within_budget(started: Instant, seconds: f64) -> (bool, String) {
    let took = started.elapsed().as_secs_f64();
    (took < seconds, format!("{took:.1}s of {seconds:.0}s budget"))
}

// ---------------------------------------------------------------- 1

/// (SMILES, heavy-atom counts by element symbol), counted by hand.
const VALID: &[(&str, &[(&str, usize)])] = &[
    ("COc1cc(OC)ccc1/C=C/N(C(=O)C)C", &[("C", 13), ("N", 1), ("O", 3)]),
    ("C", &[("C", 1)]),
    ("CC", &[("C", 2)]),
    ("CCO", &[("C", 2), ("O", 1)]),
    ("O=C=O", &[("C", 1), ("O", 2)]),
    ("C#N", &[("C", 1), ("N", 1)]),
    ("c1ccccc1", &[("C", 6)]),
    ("c1ccncc1", &[("C", 5), ("N", 1)]),
    ("c1cc[nH]c1", &[("C", 4), ("N", 1)]),
    ("c1ccoc1", &[("C", 4), ("O", 1)]),
    ("c1ccsc1", &[("C", 4), ("S", 1)]),
    ("C1CCCCC1", &[("C", 6)]),
    ("C1CC1", &[("C", 3)]),
    ("CC(=O)Oc1ccccc1C(=O)O", &[("C", 9), ("O", 4)]),
    ("CN1C=NC2=C1C(=O)N(C(=O)N2C)C", &[("C", 8), ("N", 4), ("O", 2)]),
    ("CC(C)Cc1ccc(cc1)C(C)C(=O)O", &[("C", 13), ("O", 2)]),
    ("OC(=O)CC(O)(CC(=O)O)C(=O)O", &[("C", 6), ("O", 7)]),
    ("[Na+].[Cl-]", &[("Na", 1), ("Cl", 1)]),
    ("[NH4+]", &[("N", 1)]),
    ("[O-]C(=O)C", &[("C", 2), ("O", 2)]),
    ("[13CH4]", &[("C", 1)]),
    ("C[C@H](N)C(=O)O", &[("C", 3), ("N", 1), ("O", 2)]),
    ("F/C=C/F", &[("C", 2), ("F", 2)]),
    ("F/C=C\\F", &[("C", 2), ("F", 2)]),
    ("ClC(Cl)(Cl)Cl", &[("C", 1), ("Cl", 4)]),
    ("BrCCBr", &[("C", 2), ("Br", 2)]),
    ("OB(O)O", &[("B", 1), ("O", 3)]),
    ("[SiH4]", &[("Si", 1)]),
    ("P(=O)(O)(O)O", &[("P", 1), ("O", 4)]),
    ("[Se]1C=CC=C1", &[("C", 4), ("Se", 1)]),
    ("CS(=O)(=O)C", &[("C", 2), ("S", 1), ("O", 2)]),
    ("C1CC2CCC1CC2", &[("C", 8)]),
    ("c1ccc2ccccc2c1", &[("C", 10)]),
    ("C%10CCCCC%10", &[("C", 6)]),
    ("N#CC#N", &[("C", 2), ("N", 2)]),
    ("C(C(C(C)))C", &[("C", 5)]),
    ("[2H]C([2H])([2H])O", &[("C", 1), ("O", 1)]),
    ("CC.O", &[("C", 2), ("O", 1)]),
];

const MALFORMED: &[(&str, ParseErrorKind)] = &[
    ("", ParseErrorKind::EmptyInput),
    ("CC(C", ParseErrorKind::UnbalancedParenthesis),
    ("CC)C", ParseErrorKind::UnbalancedParenthesis),
    ("C(C(C)", ParseErrorKind::UnbalancedParenthesis),
    ("C1CC", ParseErrorKind::UnclosedRingBond),
    ("c1ccccc", ParseErrorKind::UnclosedRingBond),
    ("C1CC2CC1", ParseErrorKind::UnclosedRingBond),
    ("CXC", ParseErrorKind::UnknownElementSymbol),
    ("C[Xx]", ParseErrorKind::UnknownElementSymbol),
    ("Q", ParseErrorKind::UnknownElementSymbol),
    ("C[CH3", ParseErrorKind::MalformedBracketAtom),
    ("C[C+H]", ParseErrorKind::MalformedBracketAtom),
    ("[]", ParseErrorKind::MalformedBracketAtom),
    ("CC=", ParseErrorKind::InvalidBond),
    ("=CC", ParseErrorKind::InvalidBond),
    ("C11", ParseErrorKind::InvalidBond),
    ("C:C", ParseErrorKind::InvalidBond),
    ("C$C", ParseErrorKind::UnexpectedCharacter),
    ("C()C", ParseErrorKind::UnexpectedCharacter),
    ("CC ", ParseErrorKind::UnexpectedCharacter),
];

fn symbol_number(symbol: &str) -> u8 {
    match symbol {
        "B" => 5,
        "C" => 6,
        "N" => 7,
        "O" => 8,
        "F" => 9,
        "Na" => 11,
        "Si" => 14,
        "P" => 15,
        "S" => 16,
        "Cl" => 17,
        "Se" => 34,
        "Br" => 35,
        other => panic!("fixture symbol {other}"),
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut problems = Vec::new();
    for (smiles, expected) in VALID {
        let expected: BTreeMap<u8, usize> = expected.iter().map(|&(s, n)| (symbol_number(s), n)).collect();
        match parse_smiles(smiles) {
            Ok(g) if g.element_counts() == expected => {}
            Ok(g) => problems.push(format!("{smiles}: counts {:?}", g.element_counts())),
            Err(e) => problems.push(format!("{smiles}: {e}")),
        }
    }
    for (smiles, kind) in MALFORMED {
        match parse_smiles(smiles) {
            Err(e) if e.kind == *kind => {}
            other => problems.push(format!("{smiles:?}: expected {kind}, got {other:?}")),
        }
    }
    let (fast, budget) = within_budget(started, 1.0);
    let reference = parse_smiles(VALID[0].0).map(|g| g.element_counts());
    Outcome::new(
        problems.is_empty() && fast,
        format!(
            "reference molecule {:?}; {} valid / {} malformed strings, {} mismatches {:?}; {budget}",
            reference.ok(),
            VALID.len(),
            MALFORMED.len(),
            problems.len(),
            problems
        ),
    )
}

// ---------------------------------------------------------------- 2

fn closed_form(scheme: WeightScheme, r: f64) -> f64 {
    match scheme {
        WeightScheme::NoWeight => 1.0,
        WeightScheme::Proportion => 1.0 - r,
        WeightScheme::Log => -(r + EPS).ln(),
        WeightScheme::Reciprocal => 1.0 / (r + EPS),
    }
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    // Two-category stats whose first proportion is exactly r.
    let cases = [(0.5, [5u64, 5]), (0.9, [9, 1]), (0.1, [1, 9]), (0.0, [0, 10])];
    let mut worst: f64 = 0.0;
    let mut finite = true;
    for (r, counts) in cases {
        let stats = CategoryStats::from_counts(CategorySpace::Abstract { num_categories: 2 }, counts.to_vec());
        assert_eq!(stats.proportion(0), r);
        for scheme in WeightScheme::ALL {
            let w = compute_weights(&stats, scheme).weights[0];
            let direct = scheme.raw_weight(r);
            let expected = closed_form(scheme, r);
            finite &= w.is_finite();
            worst = worst.max((w - expected).abs()).max((direct - expected).abs());
        }
    }
    let zero = CategoryStats::from_counts(CategorySpace::Abstract { num_categories: 2 }, vec![0, 10]);
    let reciprocal_at_zero = compute_weights(&zero, WeightScheme::Reciprocal).weights[0];
    let (fast, budget) = within_budget(started, 1.0);
    Outcome::new(
        worst <= 1e-9 && finite && (reciprocal_at_zero - 1e7).abs() <= 1e-9 && fast,
        format!(
            "max |w - closed form| = {worst:e} over r in {{0.5, 0.9, 0.1, 0}}; reciprocal(0) = {reciprocal_at_zero}; {budget}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> (Vec<f64>, Vec<usize>) {
    let logits = (0..rows * classes).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (logits, labels)
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ones_gap: f64 = 0.0;
    let mut scale_gap: f64 = 0.0;
    for _ in 0..200 {
        let classes = rng.random_range(2..8);
        let rows = rng.random_range(1..20);
        let (logits, labels) = random_batch(&mut rng, rows, classes);
        let probabilities: Vec<Vec<f64>> = logits.chunks(classes).map(softmax).collect();

        let unweighted: f64 =
            probabilities.iter().zip(&labels).map(|(p, &y)| -p[y].ln()).sum::<f64>() / rows as f64;
        let ones = vec![1.0; classes];
        let a = cross_entropy(&probabilities, &labels, &ones, Reduction::Mean).unwrap().value;
        let (b, _) = cross_entropy_with_logits(&logits, &labels, &ones, Reduction::Mean).unwrap();
        ones_gap = ones_gap.max((a - unweighted).abs()).max((b.value - unweighted).abs());

        let weights: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..5.0)).collect();
        let base = cross_entropy(&probabilities, &labels, &weights, Reduction::Mean).unwrap().value;
        for c in [0.1, 3.0, 1000.0] {
            let scaled: Vec<f64> = weights.iter().map(|w| c * w).collect();
            let v = cross_entropy(&probabilities, &labels, &scaled, Reduction::Mean).unwrap().value;
            let (l, _) = cross_entropy_with_logits(&logits, &labels, &scaled, Reduction::Mean).unwrap();
            scale_gap = scale_gap.max((v - base).abs() / base.abs()).max((l.value - base).abs() / base.abs());
        }
    }
    let hand = cross_entropy(&[vec![0.8, 0.2], vec![0.3, 0.7]], &[0, 1], &[0.5, 2.0], Reduction::Mean)
        .unwrap()
        .value;
    let (fast, budget) = within_budget(started, 1.0);
    Outcome::new(
        ones_gap <= 1e-12 && scale_gap <= 1e-10 && (hand - 0.32997).abs() <= 1e-4 && fast,
        format!(
            "all-ones gap {ones_gap:e}; scale-invariance gap {scale_gap:e} (relative); two-sample fixture {hand:.6}; {budget}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 101.0).collect();
    let order = [
        WeightScheme::Reciprocal,
        WeightScheme::Log,
        WeightScheme::Proportion,
        WeightScheme::NoWeight,
    ];
    let mut pairs = 0;
    let mut ratio_violations = [0usize; 3];
    for (i, &ra) in grid.iter().enumerate() {
        for &rb in &grid[i + 1..] {
            pairs += 1;
            let ratios: Vec<f64> = order.iter().map(|&s| closed_form(s, ra) / closed_form(s, rb)).collect();
            for k in 0..3 {
                if ratios[k] < ratios[k + 1] {
                    ratio_violations[k] += 1;
                }
            }
        }
    }
    let mut derivative_violations = 0;
    let mut derivative_mismatch: f64 = 0.0;
    for &r in &grid {
        let magnitudes: Vec<f64> = order
            .iter()
            .map(|&s| weight_derivative(s, r).expect("r > 0").abs())
            .collect();
        let closed = [1.0 / (r * r), 1.0 / r, 1.0, 0.0];
        for k in 0..4 {
            derivative_mismatch = derivative_mismatch.max((magnitudes[k] - closed[k]).abs());
        }
        derivative_violations += (0..3).filter(|&k| magnitudes[k] < magnitudes[k + 1]).count();
    }
    let (fast, budget) = within_budget(started, 1.0);
    let pass = ratio_violations.iter().all(|&v| v == 0) && derivative_violations == 0 && derivative_mismatch < 1e-9;
    Outcome::new(
        pass && fast,
        format!(
            "weight ratio w(ra)/w(rb), ra < rb, over {pairs} pairs of r = k/101: reciprocal >= log fails at {}, \
             log >= proportion at {}, proportion >= no_weight at {}; |dw/dr| ordering fails at {derivative_violations} \
             of {} points; reciprocal >= log holds only while -r ln r increases, i.e. r <= 1/e; {budget}",
            ratio_violations[0],
            ratio_violations[1],
            ratio_violations[2],
            grid.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut worst_case = String::new();
    let mut checked = 0usize;
    let kinds = ["cross-entropy", "mae", "both"];
    for case in 0..50 {
        let heads = rng.random_range(1..=2);
        let categories = rng.random_range(3..=6);
        let config = EncoderConfig {
            num_layers: rng.random_range(0..=2),
            hidden_dim: heads * rng.random_range(2..=4),
            num_heads: heads,
            max_spd_bucket: rng.random_range(2..=4),
            num_element_categories: categories,
            dropout_rate: if rng.random_bool(0.5) { 0.1 } else { 0.0 },
            seed: rng.random(),
            ..EncoderConfig::default()
        };
        let kind = kinds[case % 3];
        let reduction = if rng.random_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
        let mut synth = SynthConfig::new(rng.random_range(1..=3), categories, -1.0, rng.random());
        synth.nodes_per_graph = (2, 5);
        let mut encoder = Encoder::new(config).unwrap();
        let graphs: Vec<PreparedGraph> = synth_generate(&synth)
            .unwrap()
            .featurize()
            .unwrap()
            .into_iter()
            .map(|g| encoder.prepare(g))
            .collect();
        let refs: Vec<&PreparedGraph> = graphs.iter().collect();
        let masks: Vec<Vec<usize>> = graphs
            .iter()
            .map(|g| (0..g.num_nodes()).filter(|_| rng.random_bool(0.5)).collect())
            .collect();
        let weights: Vec<f64> = (0..categories).map(|_| rng.random_range(0.1..5.0)).collect();
        let targets: Vec<f64> = graphs.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let dropout_seed: u64 = rng.random();

        let loss_of = |encoder: &Encoder| {
            let mut pass = encoder.forward(&refs, &masks, Mode::Train { dropout_seed }).unwrap();
            let loss = match kind {
                "cross-entropy" => pass.cross_entropy(&weights, reduction).unwrap().0,
                "mae" => pass.mae(&targets).unwrap().0,
                _ => {
                    let (ce, _) = pass.cross_entropy(&weights, reduction).unwrap();
                    let (mae, _) = pass.mae(&targets).unwrap();
                    pass.tape_mut().add(ce, mae)
                }
            };
            (pass, loss)
        };
        let (mut pass, loss) = loss_of(&encoder);
        let grads = pass.backward(loss).unwrap();
        // Fourth-order central stencil: layer norm over two to four features
        // is curved enough that a plain central difference at 1e-4 is off
        // in the third digit.
        let h = 1e-5;
        for (t, grad) in grads.iter().enumerate() {
            for e in 0..grad.len() {
                let original = encoder.parameters().tensors()[t].data()[e];
                let mut at = |v: f64| {
                    encoder.parameters_mut().tensors_mut()[t].data_mut()[e] = v;
                    let (pass, loss) = loss_of(&encoder);
                    pass.value(loss).item()
                };
                let numeric = (at(original - 2.0 * h) - 8.0 * at(original - h) + 8.0 * at(original + h)
                    - at(original + 2.0 * h))
                    / (12.0 * h);
                at(original);
                let analytic = grad.data()[e];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                checked += 1;
                if err > worst {
                    worst = err;
                    worst_case = format!("case {case} ({kind}) {}", encoder.parameters().names()[t]);
                }
            }
        }
    }
    let (fast, budget) = within_budget(started, 30.0);
    Outcome::new(
        worst < 1e-4 && fast,
        format!("50 configurations, {checked} partials, max relative error {worst:e} at {worst_case}; {budget}"),
    )
}

// ---------------------------------------------------------------- 6, 7, 8, 10

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_EPOCHS: usize = 60;

fn trend_encoder() -> EncoderConfig {
    EncoderConfig {
        num_element_categories: 5,
        ..EncoderConfig::default()
    }
}

fn trend_data(seed: u64) -> Dataset {
    split(&synth_generate(&SynthConfig::new(2000, 5, -1.5, seed)).unwrap(), 0.8, seed).unwrap()
}

/// Recall is measured on an independent draw from the same generator.
fn trend_eval(seed: u64, encoder: &EncoderConfig) -> Vec<PreparedGraph> {
    synth_generate(&SynthConfig::new(2000, 5, -1.5, seed + 1000))
        .unwrap()
        .featurize()
        .unwrap()
        .into_iter()
        .map(|g| PreparedGraph::new(g, encoder))
        .collect()
}

fn trend_train(scheme: WeightScheme, seed: u64) -> TrainConfig {
    TrainConfig {
        scheme,
        epochs: TREND_EPOCHS,
        seeds: Seeds::from_base(seed),
        ..TrainConfig::default()
    }
}

struct TrendRun {
    loss_log: LossLog,
    recall: RecallReport,
    checkpoint: Vec<u8>,
    train_seconds: f64,
    eval_seconds: f64,
}

fn trend_run(data: &TrainingData, eval: &[PreparedGraph], scheme: WeightScheme, seed: u64) -> TrendRun {
    let encoder = trend_encoder();
    let started = Instant::now();
    let run = pretrain_prepared(data, &encoder, &trend_train(scheme, seed)).unwrap();
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let model = Encoder::with_parameters(run.checkpoint.encoder.clone(), run.checkpoint.parameters.clone()).unwrap();
    let groups = GroupSpec::default_for(data.space);
    let recall = evaluate_recall(&model, eval, data.space, MaskMode::FixedCount(1), &groups, seed).unwrap();
    TrendRun {
        loss_log: run.loss_log,
        recall,
        checkpoint: run.checkpoint.to_bytes(),
        train_seconds,
        eval_seconds: started.elapsed().as_secs_f64(),
    }
}

fn non_decreasing<T: PartialOrd>(values: &[T]) -> bool {
    values.windows(2).all(|w| w[0] <= w[1])
}

/// `None` (never below the threshold) sorts last.
fn epoch_key(epoch: Option<usize>) -> usize {
    epoch.unwrap_or(usize::MAX)
}

/// Masked-count-weighted mean of group recalls, recomputed from the report.
fn identity_gap(report: &RecallReport) -> f64 {
    let masked: u64 = report.per_group.iter().map(|g| g.masked_count).sum();
    let weighted: f64 = report
        .per_group
        .iter()
        .filter_map(|g| g.recall.map(|r| r * g.masked_count as f64))
        .sum();
    match report.overall.recall {
        Some(overall) if masked > 0 => (overall - weighted / masked as f64).abs(),
        None if masked == 0 => 0.0,
        _ => f64::INFINITY,
    }
}

#[derive(Default)]
struct Trends {
    runs: BTreeMap<(u64, WeightScheme), TrendRun>,
    seconds: f64,
    eval_seconds: f64,
}

/// Only data generation and pre-training count toward `seconds`; recall
/// evaluation on the held-out set is timed separately.
fn run_trends() -> Trends {
    let mut trends = Trends::default();
    for seed in TREND_SEEDS {
        let started = Instant::now();
        let data = TrainingData::new(&trend_data(seed), &trend_encoder()).unwrap();
        trends.seconds += started.elapsed().as_secs_f64();
        let started = Instant::now();
        let eval = trend_eval(seed, &trend_encoder());
        trends.eval_seconds += started.elapsed().as_secs_f64();
        for scheme in WeightScheme::ALL {
            let run = trend_run(&data, &eval, scheme, seed);
            trends.seconds += run.train_seconds;
            trends.eval_seconds += run.eval_seconds;
            trends.runs.insert((seed, scheme), run);
        }
    }
    trends
}

fn criterion_6(trends: &Trends) -> Outcome {
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let floor = trends.runs[&(seed, WeightScheme::NoWeight)]
            .loss_log
            .train_losses()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let threshold = 2.0 * floor;
        let epochs: Vec<Option<usize>> = WeightScheme::ALL
            .iter()
            .map(|&s| convergence_epoch(&trends.runs[&(seed, s)].loss_log, threshold))
            .collect();
        let ok = non_decreasing(&epochs.iter().map(|&e| epoch_key(e)).collect::<Vec<_>>());
        held += usize::from(ok);
        lines.push(format!("seed {seed}: threshold {threshold:.4}, epochs {epochs:?}"));
    }
    let fast = trends.seconds < 20.0 * 60.0;
    Outcome::new(
        held >= 4 && fast,
        format!(
            "convergence epochs non-decreasing no_weight..reciprocal in {held}/5 seeds; {:.1}s of 1200s budget (data and pre-training)\n    {}",
            trends.seconds,
            lines.join("\n    ")
        ),
    )
}

fn criterion_7(trends: &Trends) -> Outcome {
    let mut rare_held = 0;
    let mut frequent_held = 0;
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let reports: Vec<&RecallReport> = WeightScheme::ALL.iter().map(|&s| &trends.runs[&(seed, s)].recall).collect();
        let rare: Vec<f64> = reports
            .iter()
            .map(|r| r.rarest_group().and_then(|g| g.recall).unwrap_or(f64::NAN))
            .collect();
        let frequent: Vec<f64> = reports
            .iter()
            .map(|r| r.most_frequent_group().and_then(|g| g.recall).unwrap_or(f64::NAN))
            .collect();
        let rare_ok = non_decreasing(&rare);
        let frequent_ok = frequent.windows(2).all(|w| w[0] >= w[1]);
        rare_held += usize::from(rare_ok);
        frequent_held += usize::from(frequent_ok);
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        lines.push(format!(
            "seed {seed}: rarest {} [{}] {}, most frequent {} [{}] {}",
            reports[0].rarest_group().map_or("?", |g| g.name.as_str()),
            fmt(&rare),
            if rare_ok { "ok" } else { "out of order" },
            reports[0].most_frequent_group().map_or("?", |g| g.name.as_str()),
            fmt(&frequent),
            if frequent_ok { "ok" } else { "out of order" },
        ));
    }
    Outcome::new(
        rare_held >= 4 && frequent_held >= 3,
        format!(
            "rarest-group recall non-decreasing in {rare_held}/5 seeds (need 4), most-frequent non-increasing in \
             {frequent_held}/5 (need 3); held-out set of 2000 graphs per seed, {:.1}s of evaluation\n    {}",
            trends.eval_seconds,
            lines.join("\n    ")
        ),
    )
}

fn criterion_8(reports: &[&RecallReport]) -> Outcome {
    let worst = reports.iter().map(|r| identity_gap(r)).fold(0.0, f64::max);
    Outcome::new(
        !reports.is_empty() && worst <= 1e-12,
        format!("{} reports, max |overall - weighted group mean| = {worst:e}", reports.len()),
    )
}

// ---------------------------------------------------------------- 9

const GRID_SEED: u64 = 7;

fn grid_data() -> Dataset {
    split(&synth_generate(&SynthConfig::new(500, 5, -1.5, GRID_SEED)).unwrap(), 0.8, GRID_SEED).unwrap()
}

fn grid_config() -> GridConfig {
    GridConfig {
        encoder: trend_encoder(),
        pretrain: TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
        finetune: TrainConfig {
            epochs: 20,
            validation_interval: 5,
            ..TrainConfig::default()
        },
        schemes: WeightScheme::ALL.to_vec(),
        mask_modes: MaskMode::standard_grid(),
        seeds: vec![0],
        groups: None,
    }
}

struct GridRun {
    report: GridReport,
    checkpoints: BTreeMap<String, Vec<u8>>,
    seconds: f64,
}

fn run_grid(data: &TrainingData, out: &Path) -> GridRun {
    let started = Instant::now();
    let report = run_grid_prepared(data, &grid_config(), Some(out)).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let checkpoints = report
        .cells
        .iter()
        .map(|c| {
            let name = cell_file_name(c.scheme, c.mask_mode, c.seed);
            let bytes = fs::read(out.join("cells").join(format!("{name}.bin"))).unwrap_or_default();
            (name, bytes)
        })
        .collect();
    GridRun {
        report,
        checkpoints,
        seconds,
    }
}

fn criterion_9(data: &TrainingData, grid: &GridRun) -> Outcome {
    let config = grid_config();
    let (_, fine, _) = cell_seeds(0);
    let untrained = Encoder::new(EncoderConfig {
        seed: fine.init,
        ..config.encoder.clone()
    })
    .unwrap();
    let targets: Vec<f64> = data.validation_targets.iter().map(|t| t.expect("synthetic targets")).collect();
    let baseline = evaluate_mae(&untrained, &data.validation, &targets, 64).unwrap();

    let cells = &grid.report.cells;
    let shape_ok = cells.len() == 20
        && WeightScheme::ALL.iter().all(|&s| {
            config
                .mask_modes
                .iter()
                .all(|&m| cells.iter().filter(|c| c.scheme == s && c.mask_mode == m).count() == 1)
        });
    let populated = cells
        .iter()
        .all(|c| c.error.is_none() && c.min_validation_mae.is_some() && c.recall_report.is_some());
    let worst = cells
        .iter()
        .filter_map(|c| c.min_validation_mae)
        .fold(0.0, f64::max);
    let mut per_scheme = Vec::new();
    for s in WeightScheme::ALL {
        let best = cells
            .iter()
            .filter(|c| c.scheme == s)
            .filter_map(|c| c.min_validation_mae)
            .fold(f64::INFINITY, f64::min);
        per_scheme.push(format!("{s} {best:.3}"));
    }
    let improvement = 1.0 - worst / baseline;
    Outcome::new(
        shape_ok && populated && improvement >= 0.3 && grid.seconds < 30.0 * 60.0,
        format!(
            "{} cells (5 mask modes x 4 schemes: {}), all populated: {populated}; untrained MAE {baseline:.3}, \
             worst cell min MAE {worst:.3} ({:.0}% better); best per scheme: {}; {:.1}s of 1800s budget",
            cells.len(),
            if shape_ok { "yes" } else { "no" },
            100.0 * improvement,
            per_scheme.join(", "),
            grid.seconds
        ),
    )
}

// ---------------------------------------------------------------- 10

/// Reruns part of criteria 6 to 9 under a different thread count.
fn criterion_10(trends: Option<&Trends>, grid: Option<(&TrainingData, &GridRun)>) -> Outcome {
    let threads = rayon::current_num_threads().max(1) + 2;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let mut compared = Vec::new();
    let mut mismatches = Vec::new();
    pool.install(|| {
        let seed = TREND_SEEDS[0];
        let data = TrainingData::new(&trend_data(seed), &trend_encoder()).unwrap();
        let eval = trend_eval(seed, &trend_encoder());
        for scheme in [WeightScheme::NoWeight, WeightScheme::Reciprocal] {
            let again = trend_run(&data, &eval, scheme, seed);
            let first = match trends {
                Some(t) => &t.runs[&(seed, scheme)],
                None => {
                    // Running standalone: the reference comes from the default pool.
                    return;
                }
            };
            compared.push(format!("{scheme} seed {seed}"));
            if again.checkpoint != first.checkpoint {
                mismatches.push(format!("{scheme} checkpoint"));
            }
            if serde_json::to_vec(&again.recall).unwrap() != serde_json::to_vec(&first.recall).unwrap()
                || again.loss_log != first.loss_log
            {
                mismatches.push(format!("{scheme} report"));
            }
        }
        if let Some((data, first)) = grid {
            let dir = tempfile::tempdir().unwrap();
            let again = run_grid(data, dir.path());
            compared.push(format!("{}-cell grid", again.report.cells.len()));
            if again.checkpoints != first.checkpoints || again.checkpoints.values().any(Vec::is_empty) {
                mismatches.push("grid checkpoints".to_owned());
            }
            let a = serde_json::to_vec(&again.report.without_timings()).unwrap();
            let b = serde_json::to_vec(&first.report.without_timings()).unwrap();
            if a != b {
                mismatches.push("grid report".to_owned());
            }
        }
    });
    Outcome::new(
        !compared.is_empty() && mismatches.is_empty(),
        format!(
            "{threads} threads vs {} default; compared {}; mismatches {mismatches:?}",
            rayon::current_num_threads(),
            compared.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 11

/// Reference loss curves: no weighting first drops below 0.05 in epoch 4,
/// reciprocal weighting in epoch 20.
fn reference_curves() -> (LossLog, LossLog) {
    let mut no_weight = vec![0.62, 0.21, 0.083];
    no_weight.extend((0..97).map(|i| 0.048 * (-0.02 * i as f64).exp()));
    no_weight[10] = 0.051;
    let mut reciprocal: Vec<f64> = (0..19).map(|i| 1.9 * (-0.2 * i as f64).exp() + 0.01 * (i % 2) as f64).collect();
    reciprocal.extend((0..81).map(|i| 0.049 * (-0.015 * i as f64).exp()));
    (LossLog::from_losses(&no_weight), LossLog::from_losses(&reciprocal))
}

fn criterion_11() -> Outcome {
    let (no_weight, reciprocal) = reference_curves();
    let a = convergence_epoch(&no_weight, 0.05);
    let b = convergence_epoch(&reciprocal, 0.05);
    Outcome::new(
        a == Some(4) && b == Some(20),
        format!("no_weight {a:?}, reciprocal {b:?} at threshold 0.05"),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: u8| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, outcome: Outcome| {
        println!(
            "criterion {n:>2}: {} {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        results.push((n, outcome));
    };

    if wants(1) {
        report(1, criterion_1());
    }
    if wants(2) {
        report(2, criterion_2());
    }
    if wants(3) {
        report(3, criterion_3());
    }
    if wants(4) {
        report(4, criterion_4());
    }
    if wants(5) {
        report(5, criterion_5());
    }
    let trends = (wants(6) || wants(7) || wants(8) || wants(10)).then(run_trends);
    if let Some(t) = &trends {
        if wants(6) {
            report(6, criterion_6(t));
        }
        if wants(7) {
            report(7, criterion_7(t));
        }
    }
    let grid_dir = tempfile::tempdir().unwrap();
    let grid_input = (wants(8) || wants(9) || wants(10)).then(|| TrainingData::new(&grid_data(), &trend_encoder()).unwrap());
    let grid = grid_input.as_ref().map(|data| run_grid(data, grid_dir.path()));
    if let (Some(data), Some(g)) = (&grid_input, &grid) {
        if wants(9) {
            report(9, criterion_9(data, g));
        }
    }
    if wants(8) {
        let mut reports: Vec<&RecallReport> = Vec::new();
        if let Some(t) = &trends {
            reports.extend(t.runs.values().map(|r| &r.recall));
        }
        if let Some(g) = &grid {
            reports.extend(g.report.cells.iter().filter_map(|c| c.recall_report.as_ref()));
        }
        report(8, criterion_8(&reports));
    }
    if wants(10) {
        report(10, criterion_10(trends.as_ref(), grid_input.as_ref().zip(grid.as_ref())));
    }
    if wants(11) {
        report(11, criterion_11());
    }

    let failed: Vec<u8> = results.iter().filter(|(_, o)| !o.pass).map(|&(n, _)| n).collect();
    let unexpected: Vec<u8> = failed.iter().copied().filter(|n| !KNOWN_RED.contains(n)).collect();
    println!(
        "acceptance: {} passed, {} failed {:?} ({} known: {:?})",
        results.len() - failed.len(),
        failed.len(),
        failed,
        failed.len() - unexpected.len(),
        KNOWN_RED
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
