//! Benchmark harness: judge-labelled claims, FAR / SNR / CDR, and the
//! end-to-end runner with its ablations.
//!
//! Aggregates are micro-averaged: per-case counts are summed and the ratios
//! computed once from the sums, never as a mean of per-case ratios.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::case_model::{serialize_case, CaseError, CaseInput};
use crate::gateway::{with_fixture_key, Gateway, GatewayError, PromptRequest, TemplateId};
use crate::kb::Kb;
use crate::pipeline::{generate_initial_analysis, DraftStore, PipelineError, RiskClaim, DEFAULT_TERM_K};
use crate::prompts::render;
use crate::rnr::{refine_report, KnowledgeMode, RefineOptions, RnrError, DEFAULT_PATTERN_K};
use crate::text::extract_json_array;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCase {
    pub case_id: String,
    pub core_risks: Vec<String>,
    #[serde(default)]
    pub relevant_risks: Vec<String>,
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl GoldCase {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidGold(m));
        if self.case_id.trim().is_empty() {
            return bad("case_id is empty".into());
        }
        if self.core_risks.is_empty() {
            return bad(format!("{}: no core risks", self.case_id));
        }
        let core: HashSet<String> = self.core_risks.iter().map(|s| norm(s)).collect();
        if let Some(r) = self.relevant_risks.iter().find(|r| core.contains(&norm(r))) {
            return bad(format!("{}: {r:?} is both core and relevant", self.case_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Core,
    Relevant,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimLabel {
    pub claim: String,
    pub category: Category,
    pub fact_aligned: bool,
    /// The gold risk the judge matched, verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_match: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n_core_gt: u64,
    pub n_total_gen: u64,
    pub n_fact_gen: u64,
    pub n_core_gen: u64,
    pub n_rel_gen: u64,
    pub n_noise_gen: u64,
}

impl MetricCounts {
    pub fn check(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvariantViolation(format!("{m}: {self:?}")));
        if self.n_core_gen + self.n_rel_gen + self.n_noise_gen != self.n_total_gen {
            return bad("categories do not partition the generated claims");
        }
        if self.n_fact_gen > self.n_total_gen {
            return bad("more fact-aligned than generated claims");
        }
        if self.n_core_gen > self.n_core_gt {
            return bad("more core claims than gold core risks");
        }
        Ok(())
    }
}

impl std::ops::Add for MetricCounts {
    type Output = MetricCounts;

    fn add(self, o: MetricCounts) -> MetricCounts {
        MetricCounts {
            n_core_gt: self.n_core_gt + o.n_core_gt,
            n_total_gen: self.n_total_gen + o.n_total_gen,
            n_fact_gen: self.n_fact_gen + o.n_fact_gen,
            n_core_gen: self.n_core_gen + o.n_core_gen,
            n_rel_gen: self.n_rel_gen + o.n_rel_gen,
            n_noise_gen: self.n_noise_gen + o.n_noise_gen,
        }
    }
}

impl std::iter::Sum for MetricCounts {
    fn sum<I: Iterator<Item = MetricCounts>>(iter: I) -> Self {
        iter.fold(MetricCounts::default(), |a, b| a + b)
    }
}

/// Signal-to-noise ratio; infinite when there is signal and no noise.
/// Serialized as a number or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Finite(f64),
    Infinite,
}

impl Snr {
    pub fn as_f64(self) -> f64 {
        match self {
            Snr::Finite(v) => v,
            Snr::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Finite(v) => s.serialize_f64(*v),
            Snr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "inf" => Ok(Snr::Infinite),
            Value::Number(n) => n
                .as_f64()
                .map(Snr::Finite)
                .ok_or_else(|| serde::de::Error::custom("snr out of range")),
            other => Err(serde::de::Error::custom(format!("invalid snr {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub far: Option<f64>,
    pub snr: Option<Snr>,
    pub cdr: Option<f64>,
    pub counts: MetricCounts,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid gold case: {0}")]
    InvalidGold(String),
    #[error("metric invariant violated: {0}")]
    InvariantViolation(String),
    #[error("judge output unparsable: {0}")]
    JudgeParseFailed(String),
    #[error("judge gave no label for: {missing:?}")]
    CoverageGap { missing: Vec<String> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rnr(#[from] RnrError),
    #[error("case {0} not stored")]
    CaseNotFound(String),
}

/// FAR = fact / total, SNR = (core + rel) / noise, CDR = core / core_gt.
pub fn compute_metrics(counts: MetricCounts) -> Result<MetricsReport, EvalError> {
    counts.check()?;
    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let signal = counts.n_core_gen + counts.n_rel_gen;
    let snr = match (signal, counts.n_noise_gen) {
        (0, 0) => None,
        (_, 0) => Some(Snr::Infinite),
        (s, n) => Some(Snr::Finite(s as f64 / n as f64)),
    };
    Ok(MetricsReport {
        far: ratio(counts.n_fact_gen, counts.n_total_gen),
        snr,
        cdr: ratio(counts.n_core_gen, counts.n_core_gt),
        counts,
    })
}

/// Turns labels into counts. A core label counts as core only the first
/// time its gold risk is credited and while fewer core claims than gold
/// core risks have been counted; repeats still carry signal and count as
/// relevant. A core label whose `gold_match` is not a gold core risk is
/// capped the same way but cannot be deduplicated.
pub fn count_labels(gold: &GoldCase, labels: &[ClaimLabel]) -> MetricCounts {
    let core: HashSet<String> = gold.core_risks.iter().map(|s| norm(s)).collect();
    let mut credited: HashSet<String> = HashSet::new();
    let mut c = MetricCounts {
        n_core_gt: gold.core_risks.len() as u64,
        n_total_gen: labels.len() as u64,
        ..Default::default()
    };
    for l in labels {
        if l.fact_aligned {
            c.n_fact_gen += 1;
        }
        match l.category {
            Category::Noise => c.n_noise_gen += 1,
            Category::Relevant => c.n_rel_gen += 1,
            Category::Core => {
                let fresh = match l.gold_match.as_deref().map(norm).filter(|g| core.contains(g)) {
                    Some(g) => credited.insert(g),
                    None => true,
                };
                if fresh && c.n_core_gen < c.n_core_gt {
                    c.n_core_gen += 1;
                } else {
                    c.n_rel_gen += 1;
                }
            }
        }
    }
    c
}

fn parse_category(s: &str) -> Option<Category> {
    match s.trim().to_ascii_lowercase().as_str() {
        "core" => Some(Category::Core),
        "relevant" => Some(Category::Relevant),
        "noise" => Some(Category::Noise),
        _ => None,
    }
}

/// Parses the judge's label array.
pub fn parse_labels(completion: &str) -> Result<Vec<ClaimLabel>, EvalError> {
    let items = extract_json_array(completion)
        .ok_or_else(|| EvalError::JudgeParseFailed("no JSON array in completion".into()))?;
    items
        .iter()
        .map(|v| {
            let claim = v
                .get("claim")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty());
            let category = v.get("category").and_then(Value::as_str).and_then(parse_category);
            let fact = v.get("fact_aligned").and_then(Value::as_bool);
            let gold_match = match v.get("gold_match") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) if s.trim().is_empty() => None,
                Some(Value::String(s)) => Some(s.trim().to_string()),
                Some(other) => {
                    return Err(EvalError::JudgeParseFailed(format!(
                        "gold_match is not a string: {other}"
                    )))
                }
            };
            match (claim, category, fact) {
                (Some(claim), Some(category), Some(fact_aligned)) => Ok(ClaimLabel {
                    claim: claim.to_string(),
                    category,
                    fact_aligned,
                    gold_match,
                }),
                _ => Err(EvalError::JudgeParseFailed(format!(
                    "label missing claim/category/fact_aligned: {v}"
                ))),
            }
        })
        .collect()
}

/// One judge call per case; returns one label per generated claim in input
/// order (duplicated claims share their label).
pub fn classify_claims(
    gw: &Gateway,
    gold: &GoldCase,
    case: &CaseInput,
    generated: &[RiskClaim],
) -> Result<Vec<ClaimLabel>, EvalError> {
    gold.validate()?;
    if generated.is_empty() {
        return Ok(Vec::new());
    }
    let serialized = serialize_case(case)?;
    let json = |v: Vec<&str>| serde_json::to_string(&v).expect("strings serialize");
    let prompt = render(
        TemplateId::ClaimClassification,
        &[
            ("Case", &serialized.text),
            ("Core", &json(gold.core_risks.iter().map(String::as_str).collect())),
            (
                "Relevant",
                &json(gold.relevant_risks.iter().map(String::as_str).collect()),
            ),
            ("Generated", &json(generated.iter().map(|c| c.text.as_str()).collect())),
        ],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::ClaimClassification,
        with_fixture_key(&prompt, &gold.case_id),
    ))?;
    let parsed = parse_labels(&out.text)?;
    let wanted: HashSet<String> = generated.iter().map(|c| norm(&c.text)).collect();
    let mut by_text = std::collections::HashMap::new();
    for l in parsed {
        let key = norm(&l.claim);
        if !wanted.contains(&key) {
            return Err(EvalError::JudgeParseFailed(format!(
                "label for unknown claim {:?}",
                l.claim
            )));
        }
        by_text.entry(key).or_insert(l);
    }
    let mut missing = Vec::new();
    let labels = generated
        .iter()
        .filter_map(|c| match by_text.get(&norm(&c.text)) {
            Some(l) => Some(ClaimLabel {
                claim: c.text.clone(),
                ..l.clone()
            }),
            None => {
                missing.push(c.claim_id.clone());
                None
            }
        })
        .collect();
    if missing.is_empty() {
        Ok(labels)
    } else {
        Err(EvalError::CoverageGap { missing })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Draft claims are scored directly; refine is bypassed.
    NoReflection,
    /// Refine runs with no business logic or risk patterns.
    NoKnowledgeBase,
    /// Risk patterns are retrieved with the case text, not the claims.
    NonTargetedRetrieval,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoReflection,
        Ablation::NoKnowledgeBase,
        Ablation::NonTargetedRetrieval,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Full",
            Ablation::NoReflection => "w/o Reflection",
            Ablation::NoKnowledgeBase => "w/o Knowledge Base",
            Ablation::NonTargetedRetrieval => "w/ Non-Targeted Retrieval",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoReflection => "no-reflection",
            Ablation::NoKnowledgeBase => "no-knowledge-base",
            Ablation::NonTargetedRetrieval => "non-targeted-retrieval",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of full, no-reflection, no-knowledge-base, non-targeted-retrieval"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub ablation: Ablation,
    pub term_k: usize,
    pub pattern_k: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            term_k: DEFAULT_TERM_K,
            pattern_k: DEFAULT_PATTERN_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub final_claims: Vec<RiskClaim>,
    pub labels: Vec<ClaimLabel>,
    pub counts: MetricCounts,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub config: BenchmarkConfig,
    pub config_fingerprint: String,
    pub metrics: MetricsReport,
    pub cases: Vec<CaseResult>,
    pub excluded_count: usize,
    pub excluded: Vec<Exclusion>,
}

fn fingerprint(config: &BenchmarkConfig, gw: &Gateway, kb: &Kb, gold: &[GoldCase]) -> String {
    let meta = kb.meta();
    let doc = serde_json::json!({
        "config": config,
        "backend": gw.default_backend(),
        "embedder": meta.embedder_id,
        "alpha": meta.alpha,
        "gold": gold.iter().map(|g| g.case_id.as_str()).collect::<Vec<_>>(),
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}

fn run_case(
    gw: &Gateway,
    kb: &Kb,
    gold: &GoldCase,
    case: &CaseInput,
    config: BenchmarkConfig,
) -> Result<CaseResult, EvalError> {
    gold.validate()?;
    let drafts = DraftStore::in_memory();
    let draft = generate_initial_analysis(gw, &kb.snapshot(), &drafts, case, config.term_k)?;
    let final_claims = match config.ablation {
        Ablation::NoReflection => draft.claims.clone(),
        a => {
            let knowledge = match a {
                Ablation::NoKnowledgeBase => KnowledgeMode::Empty,
                Ablation::NonTargetedRetrieval => KnowledgeMode::NonTargeted,
                _ => KnowledgeMode::Targeted,
            };
            let opts = RefineOptions {
                pattern_k: config.pattern_k,
                knowledge,
            };
            refine_report(gw, kb, case, &draft, opts)?.final_claims
        }
    };
    let labels = classify_claims(gw, gold, case, &final_claims)?;
    let counts = count_labels(gold, &labels);
    let metrics = compute_metrics(counts)?;
    Ok(CaseResult {
        case_id: gold.case_id.clone(),
        final_claims,
        labels,
        counts,
        metrics,
    })
}

/// generate → refine (unless ablated) → classify → count for every gold
/// case in parallel. Failed cases are excluded and listed; the aggregate is
/// computed from the summed counts of the rest.
pub fn run_benchmark<F>(
    gw: &Gateway,
    kb: &Kb,
    gold: &[GoldCase],
    load_case: F,
    config: BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError>
where
    F: Fn(&str) -> Option<CaseInput> + Sync,
{
    let outcomes: Vec<Result<CaseResult, EvalError>> = gold
        .par_iter()
        .map(|g| {
            let case = load_case(&g.case_id).ok_or_else(|| EvalError::CaseNotFound(g.case_id.clone()))?;
            run_case(gw, kb, g, &case, config)
        })
        .collect();
    let mut cases = Vec::new();
    let mut excluded = Vec::new();
    for (g, o) in gold.iter().zip(outcomes) {
        match o {
            Ok(r) => cases.push(r),
            Err(e) => excluded.push(Exclusion {
                case_id: g.case_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let metrics = compute_metrics(cases.iter().map(|c| c.counts).sum())?;
    Ok(BenchmarkReport {
        label: config.ablation.label().to_string(),
        config,
        config_fingerprint: fingerprint(&config, gw, kb, gold),
        metrics,
        cases,
        excluded_count: excluded.len(),
        excluded,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn fmt_snr(v: Option<Snr>) -> String {
    match v {
        None => "-".into(),
        Some(Snr::Infinite) => "inf".into(),
        Some(Snr::Finite(v)) => format!("{v:.2}"),
    }
}

/// Fixed-width `Method FAR SNR CDR` table, one row per report.
pub fn table_summary(reports: &[BenchmarkReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "Method", "FAR", "SNR", "CDR");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>6}  {:>6}",
            r.label,
            fmt_metric(r.metrics.far),
            fmt_snr(r.metrics.snr),
            fmt_metric(r.metrics.cdr)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;

    fn counts(core_gt: u64, total: u64, fact: u64, core: u64, rel: u64, noise: u64) -> MetricCounts {
        MetricCounts {
            n_core_gt: core_gt,
            n_total_gen: total,
            n_fact_gen: fact,
            n_core_gen: core,
            n_rel_gen: rel,
            n_noise_gen: noise,
        }
    }

    #[test]
    fn formulas_and_edges() {
        let r = compute_metrics(counts(10, 100, 83, 5, 70, 25)).unwrap();
        assert_eq!(r.far, Some(0.83));
        assert_eq!(r.cdr, Some(0.5));
        assert_eq!(r.snr, Some(Snr::Finite(3.0)));
        let r = compute_metrics(counts(1, 5, 0, 0, 0, 5)).unwrap();
        assert_eq!(r.snr, Some(Snr::Finite(0.0)));
        let r = compute_metrics(counts(1, 0, 0, 0, 0, 0)).unwrap();
        assert_eq!((r.far, r.snr), (None, None));
        let r = compute_metrics(counts(0, 1, 1, 0, 1, 0)).unwrap();
        assert_eq!((r.cdr, r.snr), (None, Some(Snr::Infinite)));
        assert!(matches!(
            compute_metrics(counts(1, 3, 1, 1, 1, 0)),
            Err(EvalError::InvariantViolation(_))
        ));
        assert!(compute_metrics(counts(0, 1, 1, 1, 0, 0)).is_err());
        assert!(compute_metrics(counts(1, 1, 2, 1, 0, 0)).is_err());
    }

    #[test]
    fn snr_serialization() {
        let r = compute_metrics(counts(1, 1, 1, 1, 0, 0)).unwrap();
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["snr"], "inf");
        let back: MetricsReport = serde_json::from_value(j).unwrap();
        assert_eq!(back, r);
    }

    fn gold() -> GoldCase {
        GoldCase {
            case_id: "g1".into(),
            core_risks: vec!["bulk buying".into(), "shared address".into()],
            relevant_risks: vec!["new account".into()],
        }
    }

    fn label(claim: &str, cat: Category, gm: Option<&str>) -> ClaimLabel {
        ClaimLabel {
            claim: claim.into(),
            category: cat,
            fact_aligned: cat != Category::Noise,
            gold_match: gm.map(str::to_string),
        }
    }

    #[test]
    fn duplicate_core_counts_once_as_core() {
        let labels = vec![
            label("bulk buying", Category::Core, Some("bulk buying")),
            label("bulk buying", Category::Core, Some("bulk buying")),
            label("x", Category::Noise, None),
        ];
        let c = count_labels(&gold(), &labels);
        assert_eq!((c.n_core_gen, c.n_rel_gen, c.n_noise_gen, c.n_total_gen), (1, 1, 1, 3));
        c.check().unwrap();
    }

    #[test]
    fn gold_validation() {
        let mut g = gold();
        g.relevant_risks.push(" bulk  buying".into());
        assert!(g.validate().is_err());
        let mut g = gold();
        g.core_risks.clear();
        assert!(g.validate().is_err());
    }

    fn case() -> CaseInput {
        CaseInput::from_json(r#"{"case_id":"g1","scenario_key":"s","tabular":{"orders":9}}"#).unwrap()
    }

    fn claims(texts: &[&str]) -> Vec<RiskClaim> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| RiskClaim::new(format!("c{}", i + 1), *t, crate::pipeline::ClaimOrigin::ModelInitial))
            .collect()
    }

    #[test]
    fn judge_labels_and_gaps() {
        let judged = r#"[{"claim":"bulk buying","category":"core","fact_aligned":true,"gold_match":"bulk buying"},{"claim":"weather","category":"noise","fact_aligned":false,"gold_match":null}]"#;
        let gw = Gateway::with_mock(MockBackend::default().on(TemplateId::ClaimClassification, "g1", judged));
        let l = classify_claims(&gw, &gold(), &case(), &claims(&["bulk buying", "weather"])).unwrap();
        assert_eq!(l[0].category, Category::Core);
        assert_eq!(l[1].category, Category::Noise);
        match classify_claims(&gw, &gold(), &case(), &claims(&["bulk buying", "weather", "c"])) {
            Err(EvalError::CoverageGap { missing }) => assert_eq!(missing, vec!["c3"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            classify_claims(&gw, &gold(), &case(), &claims(&["bulk buying"])),
            Err(EvalError::JudgeParseFailed(_))
        ));
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!(Ablation::NoReflection.label(), "w/o Reflection");
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn table_layout() {
        let report = BenchmarkReport {
            label: "Full".into(),
            config: BenchmarkConfig::default(),
            config_fingerprint: "x".into(),
            metrics: compute_metrics(counts(2, 4, 3, 2, 2, 0)).unwrap(),
            cases: vec![],
            excluded_count: 0,
            excluded: vec![],
        };
        let t = table_summary(&[report]);
        assert_eq!(t.lines().nth(1).unwrap(), "Full      0.75     inf    1.00");
    }
}
