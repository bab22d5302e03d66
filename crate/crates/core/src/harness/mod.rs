//! Campaign orchestration: load the corpus, run compile→render→filter→
//! resolve→target pipelines, and emit one machine-readable report record
//! per scenario.
//!
//! Offline campaigns are fully deterministic (timing fields aside). The
//! live branch replays rendered prompts against an OpenAI-compatible
//! endpoint and is advisory only: it never gates a scenario's pass/fail.

pub mod live;
pub mod mock;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{build_bobby_chain, compile_chain, CompileStrategy};
use crate::filters::{FilterError, FilterLexicon, PatternMatch};
use crate::knowledge_base::{KbError, KnowledgeBase};
use crate::render::{baseline_assembly, baseline_concat, render, PromptStyle, RenderedPrompt};
use crate::resolver::{reconstruction_check, MatchPolicy};
use crate::segmentation::Payload;
use crate::sql_range::{app_submit, AppOutcome, EffectKind, GuardedSqlApp, SqlError};

pub use live::{live_submit, LiveConfig, LiveOutcome};

/// How a scenario builds its prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioStrategy {
    NumberedSteps,
    Madlibs,
    /// The shipped four-step SQL injection chain.
    FixtureBobby,
    BaselineConcat,
    BaselineAssembly,
}

/// Where the rendered prompt is sent, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TargetKind {
    #[serde(rename = "none")]
    #[default]
    None,
    #[serde(rename = "sql_range")]
    SqlRange,
    #[serde(rename = "live")]
    Live,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    pub payload: Payload,
    pub strategy: ScenarioStrategy,
    /// Render style override; defaults to the strategy's natural style.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<PromptStyle>,
    /// Chunk count for the assembly baseline (default 4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<usize>,
    /// Reconstruction policy (default strict).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<MatchPolicy>,
    #[serde(default)]
    pub target: TargetKind,
    /// Run the SQL range without its guard lexicon.
    #[serde(default)]
    pub undefended: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub kb_path: PathBuf,
    pub filter_suite_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub live: Option<LiveConfig>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("campaign config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate scenario id '{0}'")]
    DuplicateScenario(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("config error: {0}")]
    Config(String),
}

impl CampaignConfig {
    /// Reads a config file; kb and filter paths resolve relative to the
    /// config file's directory, the report path relative to the process.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let source = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: CampaignConfig = serde_json::from_str(&source)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.kb_path = base.join(&config.kb_path);
        config.filter_suite_path = base.join(&config.filter_suite_path);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut ids = BTreeSet::new();
        for scenario in &self.scenarios {
            if !ids.insert(scenario.id.clone()) {
                return Err(HarnessError::DuplicateScenario(scenario.id.clone()));
            }
        }
        Ok(())
    }

    /// Installs a live endpoint and retargets offline (`none`) scenarios
    /// to it; range and baseline scenarios are left alone.
    pub fn enable_live(&mut self, endpoint: String, model: String) {
        self.live = Some(LiveConfig::new(endpoint, model));
        for scenario in &mut self.scenarios {
            let baseline = matches!(
                scenario.strategy,
                ScenarioStrategy::BaselineConcat | ScenarioStrategy::BaselineAssembly
            );
            if scenario.target == TargetKind::None && !baseline {
                scenario.target = TargetKind::Live;
            }
        }
    }
}

/// One lexicon's verdict summary inside a report record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconVerdict {
    pub lexicon: String,
    pub blocked: bool,
    pub matches: Vec<PatternMatch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub policy: MatchPolicy,
    pub matched: bool,
}

/// One line of the newline-delimited report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario_id: String,
    pub style: PromptStyle,
    pub filter_verdicts: Vec<LexiconVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconstructionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<AppOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub live: Option<LiveOutcome>,
    /// Whether the scenario met its own expectation: evasion plus
    /// reconstruction (plus target execution) for chain scenarios,
    /// detection by at least one lexicon for baselines.
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock duration; excluded from determinism comparisons.
    pub timing_ms: u64,
}

impl AttackReport {
    /// Copy with volatile fields zeroed, for run-to-run comparisons.
    pub fn determinism_view(&self) -> AttackReport {
        AttackReport {
            timing_ms: 0,
            ..self.clone()
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports always serialize")
    }
}

fn verdict_summaries(prompt: &RenderedPrompt) -> Vec<LexiconVerdict> {
    prompt
        .self_check
        .iter()
        .map(|(lexicon, verdict)| LexiconVerdict {
            lexicon: lexicon.clone(),
            blocked: verdict.blocked,
            matches: verdict.matches.clone(),
        })
        .collect()
}

struct ScenarioRun {
    style: PromptStyle,
    filter_verdicts: Vec<LexiconVerdict>,
    reconstruction: Option<ReconstructionSummary>,
    target: Option<AppOutcome>,
    live: Option<LiveOutcome>,
    passed: bool,
    error: Option<String>,
}

impl ScenarioRun {
    fn failed(style: PromptStyle, error: String) -> Self {
        ScenarioRun {
            style,
            filter_verdicts: Vec::new(),
            reconstruction: None,
            target: None,
            live: None,
            passed: false,
            error: Some(error),
        }
    }
}

fn run_chain_scenario(
    scenario: &ScenarioConfig,
    kb: &KnowledgeBase,
    suite: &[FilterLexicon],
    live: Option<&LiveConfig>,
) -> ScenarioRun {
    let (plan, style) = match scenario.strategy {
        ScenarioStrategy::NumberedSteps | ScenarioStrategy::Madlibs => {
            let strategy = match scenario.strategy {
                ScenarioStrategy::Madlibs => CompileStrategy::Madlibs,
                _ => CompileStrategy::NumberedSteps,
            };
            let style = scenario.style.unwrap_or_else(|| strategy.default_style());
            match compile_chain(&scenario.payload, kb, suite, strategy) {
                Ok(plan) => (plan, style),
                Err(err) => return ScenarioRun::failed(style, err.to_string()),
            }
        }
        ScenarioStrategy::FixtureBobby => (
            build_bobby_chain(),
            scenario.style.unwrap_or(PromptStyle::NumberedSteps),
        ),
        _ => unreachable!("baselines handled separately"),
    };

    let prompt = match render(&plan, kb, suite, style) {
        Ok(prompt) => prompt,
        Err(err) => return ScenarioRun::failed(style, err.to_string()),
    };
    let filter_verdicts = verdict_summaries(&prompt);
    let evaded = filter_verdicts.iter().all(|v| !v.blocked);

    let policy = scenario.policy.unwrap_or_default();
    let reconstruction = match reconstruction_check(&plan, kb, &scenario.payload, policy) {
        Ok(outcome) => ReconstructionSummary {
            policy,
            matched: outcome.matched,
        },
        Err(err) => {
            return ScenarioRun {
                style,
                filter_verdicts,
                reconstruction: None,
                target: None,
                live: None,
                passed: false,
                error: Some(err.to_string()),
            }
        }
    };

    let mut error = None;
    let mut target_outcome = None;
    let mut target_ok = true;
    let mut live_outcome = None;
    match scenario.target {
        TargetKind::None => {}
        TargetKind::SqlRange => {
            let app = match sql_range_app(scenario, suite) {
                Ok(app) => app,
                Err(err) => return ScenarioRun::failed(style, err.to_string()),
            };
            let (_, outcome) = app_submit(&app, &prompt.text, Some(&plan), kb);
            target_ok = matches!(
                &outcome,
                AppOutcome::Executed { effect, .. }
                    if matches!(effect.effect, EffectKind::Dropped { .. })
            );
            target_outcome = Some(outcome);
        }
        TargetKind::Live => match live {
            Some(cfg) => live_outcome = Some(live_submit(&prompt.text, &scenario.payload.text, cfg)),
            None => error = Some("scenario targets a live endpoint but no live config is set".into()),
        },
    }

    let passed = error.is_none() && evaded && reconstruction.matched && target_ok;
    ScenarioRun {
        style,
        filter_verdicts,
        reconstruction: Some(reconstruction),
        target: target_outcome,
        live: live_outcome,
        passed,
        error,
    }
}

/// The range app a scenario talks to: the suite's `sql-guard` lexicon over
/// the Chinook-style schema, or an empty guard when `undefended` is set.
fn sql_range_app(
    scenario: &ScenarioConfig,
    suite: &[FilterLexicon],
) -> Result<GuardedSqlApp, HarnessError> {
    let db = crate::fixtures::chinook_db();
    if scenario.undefended {
        return Ok(GuardedSqlApp::undefended(db));
    }
    let guard = suite
        .iter()
        .find(|l| l.name == "sql-guard")
        .cloned()
        .ok_or_else(|| {
            HarnessError::Config("sql_range target needs a 'sql-guard' lexicon in the suite".into())
        })?;
    Ok(GuardedSqlApp::new(guard, db))
}

fn run_baseline_scenario(
    scenario: &ScenarioConfig,
    suite: &[FilterLexicon],
) -> ScenarioRun {
    let (prompt, style) = match scenario.strategy {
        ScenarioStrategy::BaselineConcat => (
            Ok(baseline_concat(&scenario.payload, suite)),
            PromptStyle::BaselineConcat,
        ),
        ScenarioStrategy::BaselineAssembly => (
            baseline_assembly(&scenario.payload, scenario.parts.unwrap_or(4), suite),
            PromptStyle::BaselineAssembly,
        ),
        _ => unreachable!("chain strategies handled separately"),
    };
    let prompt = match prompt {
        Ok(prompt) => prompt,
        Err(err) => return ScenarioRun::failed(style, err.to_string()),
    };
    let filter_verdicts = verdict_summaries(&prompt);
    let detected = filter_verdicts.iter().any(|v| v.blocked);
    ScenarioRun {
        style,
        filter_verdicts,
        reconstruction: None,
        target: None,
        live: None,
        passed: detected,
        error: None,
    }
}

/// Runs every scenario in config order. Per-scenario problems land in the
/// report; only config-level problems abort.
pub fn run_campaign(config: &CampaignConfig) -> Result<Vec<AttackReport>, HarnessError> {
    config.validate()?;
    let kb_source = fs::read_to_string(&config.kb_path).map_err(|source| HarnessError::Io {
        path: config.kb_path.clone(),
        source,
    })?;
    let kb = crate::knowledge_base::load_kb(&kb_source)?;
    let suite_source =
        fs::read_to_string(&config.filter_suite_path).map_err(|source| HarnessError::Io {
            path: config.filter_suite_path.clone(),
            source,
        })?;
    let suite = crate::filters::load_filter_suite(&suite_source)?;

    let mut reports = Vec::with_capacity(config.scenarios.len());
    for scenario in &config.scenarios {
        let started = Instant::now();
        let run = match scenario.strategy {
            ScenarioStrategy::BaselineConcat | ScenarioStrategy::BaselineAssembly => {
                run_baseline_scenario(scenario, &suite)
            }
            _ => run_chain_scenario(scenario, &kb, &suite, config.live.as_ref()),
        };
        reports.push(AttackReport {
            scenario_id: scenario.id.clone(),
            style: run.style,
            filter_verdicts: run.filter_verdicts,
            reconstruction: run.reconstruction,
            target: run.target,
            live: run.live,
            passed: run.passed,
            error: run.error,
            timing_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(reports)
}

/// Writes the newline-delimited report, one record per line.
pub fn write_report(path: &Path, reports: &[AttackReport]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for report in reports {
        out.push_str(&report.to_json_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// True when any scenario missed its expectation.
pub fn campaign_failed(reports: &[AttackReport]) -> bool {
    reports.iter().any(|r| !r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture_config(dir: &Path) -> PathBuf {
        for (name, body) in [
            ("kb.json", crate::fixtures::KB_JSON),
            ("filters.json", crate::fixtures::FILTER_SUITE_JSON),
            ("campaign.json", crate::fixtures::CAMPAIGN_JSON),
        ] {
            let mut file = fs::File::create(dir.join(name)).unwrap();
            file.write_all(body.as_bytes()).unwrap();
        }
        dir.join("campaign.json")
    }

    #[test]
    fn fixture_campaign_produces_one_record_per_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let config = CampaignConfig::load(&fixture_config(dir.path())).unwrap();
        let reports = run_campaign(&config).unwrap();
        assert_eq!(reports.len(), 4);

        let by_id: std::collections::BTreeMap<&str, &AttackReport> =
            reports.iter().map(|r| (r.scenario_id.as_str(), r)).collect();
        for id in ["hello-world", "bobby-tables", "madlibs"] {
            let report = by_id[id];
            assert!(report.passed, "{id}: {:?}", report.error);
            assert!(report.filter_verdicts.iter().all(|v| !v.blocked), "{id}");
            assert!(report.reconstruction.as_ref().unwrap().matched, "{id}");
        }
        let baseline = by_id["baseline-concat"];
        assert!(baseline.passed);
        assert!(baseline.filter_verdicts.iter().any(|v| v.blocked));

        match by_id["bobby-tables"].target.as_ref().unwrap() {
            AppOutcome::Executed { effect, .. } => {
                assert_eq!(effect.effect, EffectKind::Dropped { table: "Employee".into() });
            }
            other => panic!("expected execution, got {other:?}"),
        }
    }

    #[test]
    fn empty_scenario_list_yields_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        fixture_config(dir.path());
        let config = CampaignConfig {
            kb_path: dir.path().join("kb.json"),
            filter_suite_path: dir.path().join("filters.json"),
            report_path: None,
            scenarios: Vec::new(),
            live: None,
        };
        let reports = run_campaign(&config).unwrap();
        assert!(reports.is_empty());
        assert!(!campaign_failed(&reports));
    }

    #[test]
    fn campaign_is_deterministic_modulo_timing() {
        let dir = tempfile::tempdir().unwrap();
        let config = CampaignConfig::load(&fixture_config(dir.path())).unwrap();
        let first: Vec<String> = run_campaign(&config)
            .unwrap()
            .iter()
            .map(|r| r.determinism_view().to_json_line())
            .collect();
        let second: Vec<String> = run_campaign(&config)
            .unwrap()
            .iter()
            .map(|r| r.determinism_view().to_json_line())
            .collect();
        assert_eq!(first, second);
    }

    #[test]
    fn failing_scenario_is_captured_not_thrown() {
        let dir = tempfile::tempdir().unwrap();
        fixture_config(dir.path());
        let config = CampaignConfig {
            kb_path: dir.path().join("kb.json"),
            filter_suite_path: dir.path().join("filters.json"),
            report_path: None,
            scenarios: vec![ScenarioConfig {
                id: "no-gadget".into(),
                // "Hello" gets blanked by the suite but only a full
                // "Hello, World!" gadget exists, so compilation fails
                payload: Payload::new("no-gadget", "Hello nobody"),
                strategy: ScenarioStrategy::NumberedSteps,
                style: None,
                parts: None,
                policy: None,
                target: TargetKind::None,
                undefended: false,
            }],
            live: None,
        };
        let reports = run_campaign(&config).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(!reports[0].passed);
        assert!(reports[0].error.is_some());
        assert!(campaign_failed(&reports));
    }

    #[test]
    fn duplicate_scenario_ids_abort_the_campaign() {
        let scenario = ScenarioConfig {
            id: "dup".into(),
            payload: Payload::new("p", "x"),
            strategy: ScenarioStrategy::NumberedSteps,
            style: None,
            parts: None,
            policy: None,
            target: TargetKind::None,
            undefended: false,
        };
        let config = CampaignConfig {
            kb_path: "kb.json".into(),
            filter_suite_path: "filters.json".into(),
            report_path: None,
            scenarios: vec![scenario.clone(), scenario],
            live: None,
        };
        assert!(matches!(
            run_campaign(&config),
            Err(HarnessError::DuplicateScenario(_))
        ));
    }

    #[test]
    fn enable_live_retargets_offline_chain_scenarios_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = CampaignConfig::load(&fixture_config(dir.path())).unwrap();
        config.enable_live("http://127.0.0.1:1".into(), "test-model".into());
        let by_id: std::collections::BTreeMap<&str, &ScenarioConfig> = config
            .scenarios
            .iter()
            .map(|s| (s.id.as_str(), s))
            .collect();
        assert_eq!(by_id["hello-world"].target, TargetKind::Live);
        assert_eq!(by_id["madlibs"].target, TargetKind::Live);
        assert_eq!(by_id["bobby-tables"].target, TargetKind::SqlRange);
        assert_eq!(by_id["baseline-concat"].target, TargetKind::None);
    }
}
