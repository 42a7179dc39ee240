//! Credential validity probing, gated hard on ethics: only sandbox/test
//! credential types may ever be probed live, and only when the operator
//! passes an explicit acknowledgment flag. The shipped probers are dry-run
//! (renders the request, sends nothing) and stub (local fixture). Outcomes
//! are decided from the HTTP status code alone; response bodies are never
//! read or persisted, and no log line contains secret plaintext.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::CandidateSecret;
use crate::gateway::Clock;
use crate::registry::SecretTypeSpec;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("ethics gate: live probing refused for secret type {secret_type_id} ({reason})")]
    EthicsGate {
        secret_type_id: String,
        reason: String,
    },
    #[error("candidate {0} is not plausible and will not be probed")]
    NotPlausible(String),
    #[error("secret type {0} declares no probe configuration")]
    NoProbeConfig(String),
    #[error("transport failure probing candidate {candidate_id}: {detail}")]
    Transport {
        candidate_id: String,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    DryRun,
    Stub,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    NotAttempted,
    Valid,
    Invalid,
    Indeterminate,
}

/// How to probe one secret type. Live construction is refused unless the
/// registry marks the type validatable AND the acknowledgment flag is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub secret_type_id: String,
    /// May contain a `{{secret}}` placeholder.
    pub endpoint_template: String,
    pub method: String,
    /// Header line with a `{{secret}}` placeholder, e.g.
    /// `Authorization: Bearer {{secret}}`.
    pub auth_header: String,
    pub success_statuses: BTreeSet<u16>,
    pub mode: ProbeMode,
    /// Length of the type's fixed prefix, used when masking.
    pub fixed_prefix_len: usize,
}

impl ProbeSpec {
    /// Builds a probe spec from the registry record. The three live gates:
    /// mode == live, type validatable, operator acknowledgment.
    pub fn from_registry(
        spec: &SecretTypeSpec,
        mode: ProbeMode,
        ack_live_probe: bool,
    ) -> Result<Self, ProbeError> {
        if mode == ProbeMode::Live {
            if !spec.validation_supported {
                return Err(ProbeError::EthicsGate {
                    secret_type_id: spec.id.clone(),
                    reason: "type is not marked validatable (sandbox/test credentials only)"
                        .to_string(),
                });
            }
            if !ack_live_probe {
                return Err(ProbeError::EthicsGate {
                    secret_type_id: spec.id.clone(),
                    reason: "live probing requires the explicit --ack-live-probe flag".to_string(),
                });
            }
        }
        let probe = spec
            .probe
            .as_ref()
            .ok_or_else(|| ProbeError::NoProbeConfig(spec.id.clone()))?;
        Ok(ProbeSpec {
            secret_type_id: spec.id.clone(),
            endpoint_template: probe.endpoint.clone(),
            method: probe.method.clone(),
            auth_header: probe.auth_header.clone(),
            success_statuses: probe.success.iter().copied().collect(),
            mode,
            fixed_prefix_len: spec.prefix_literal().map_or(0, |p| p.len()),
        })
    }
}

/// Outcome record; carries the candidate id, never the secret itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub candidate_id: String,
    pub outcome: ProbeOutcome,
    pub status_code: Option<u16>,
    pub note: String,
}

/// Masks a secret for console or report output: the fixed prefix plus the
/// next six characters stay, the rest becomes asterisks.
pub fn mask_secret(secret: &str, fixed_prefix_len: usize) -> String {
    let visible = fixed_prefix_len + 6;
    secret
        .chars()
        .enumerate()
        .map(|(i, c)| if i < visible { c } else { '*' })
        .collect()
}

/// Local fixture standing in for a provider endpoint: a set of accepted
/// secrets and the statuses it answers with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubFixture {
    pub accepted: BTreeSet<String>,
    pub accept_status: u16,
    pub reject_status: u16,
}

impl StubFixture {
    pub fn accepting(secrets: impl IntoIterator<Item = String>) -> Self {
        StubFixture {
            accepted: secrets.into_iter().collect(),
            accept_status: 200,
            reject_status: 401,
        }
    }
}

/// Serializes probes with the same minimum-gap rate limiting the model
/// gateway uses.
pub struct Prober {
    spec: ProbeSpec,
    stub: Option<StubFixture>,
    clock: Box<dyn Clock>,
    min_gap_ms: u64,
    last_ms: Option<u64>,
}

impl Prober {
    pub fn new(spec: ProbeSpec, clock: Box<dyn Clock>, min_gap_ms: u64) -> Self {
        Prober {
            spec,
            stub: None,
            clock,
            min_gap_ms,
            last_ms: None,
        }
    }

    pub fn with_stub(mut self, stub: StubFixture) -> Self {
        self.stub = Some(stub);
        self
    }

    fn honor_gap(&mut self) {
        if let Some(last) = self.last_ms {
            self.clock.wait_until_ms(last + self.min_gap_ms);
        }
        self.last_ms = Some(self.clock.now_ms());
    }

    /// Probes one plausible candidate per the spec's mode.
    pub fn probe(&mut self, candidate: &CandidateSecret) -> Result<ProbeResult, ProbeError> {
        if !candidate.plausible {
            return Err(ProbeError::NotPlausible(candidate.candidate_id.clone()));
        }
        match self.spec.mode {
            ProbeMode::DryRun => Ok(self.dry_run(candidate)),
            ProbeMode::Stub => {
                self.honor_gap();
                Ok(self.stub_probe(candidate))
            }
            ProbeMode::Live => {
                self.honor_gap();
                self.live_probe(candidate)
            }
        }
    }

    /// Renders the request that live mode would send, with the secret
    /// masked, and sends nothing.
    fn dry_run(&self, candidate: &CandidateSecret) -> ProbeResult {
        let masked = mask_secret(&candidate.raw_text, self.spec.fixed_prefix_len);
        let endpoint = self.spec.endpoint_template.replace("{{secret}}", &masked);
        let header = self.spec.auth_header.replace("{{secret}}", &masked);
        ProbeResult {
            candidate_id: candidate.candidate_id.clone(),
            outcome: ProbeOutcome::NotAttempted,
            status_code: None,
            note: format!("dry-run preview: {} {} | {}", self.spec.method, endpoint, header),
        }
    }

    fn outcome_of_status(&self, status: u16) -> ProbeOutcome {
        if self.spec.success_statuses.contains(&status) {
            ProbeOutcome::Valid
        } else if status == 401 || status == 403 {
            ProbeOutcome::Invalid
        } else {
            ProbeOutcome::Indeterminate
        }
    }

    fn stub_probe(&self, candidate: &CandidateSecret) -> ProbeResult {
        let stub = self.stub.as_ref().expect("stub prober built with_stub");
        let status = if stub.accepted.contains(&candidate.raw_text) {
            stub.accept_status
        } else {
            stub.reject_status
        };
        ProbeResult {
            candidate_id: candidate.candidate_id.clone(),
            outcome: self.outcome_of_status(status),
            status_code: Some(status),
            note: "stub fixture".to_string(),
        }
    }

    /// Sends one request and inspects the status code only; the body is
    /// never read.
    fn live_probe(&self, candidate: &CandidateSecret) -> Result<ProbeResult, ProbeError> {
        let endpoint = self
            .spec
            .endpoint_template
            .replace("{{secret}}", &candidate.raw_text);
        let (header_name, header_value) = match self.spec.auth_header.split_once(':') {
            Some((n, v)) => (
                n.trim().to_string(),
                v.trim().replace("{{secret}}", &candidate.raw_text),
            ),
            None => ("Authorization".to_string(), self.spec.auth_header.clone()),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| ProbeError::Transport {
                candidate_id: candidate.candidate_id.clone(),
                detail: e.to_string(),
            })?;
        let method: reqwest::Method =
            self.spec.method.parse().unwrap_or(reqwest::Method::GET);
        let resp = client
            .request(method, &endpoint)
            .header(header_name, header_value)
            .send()
            .map_err(|e| ProbeError::Transport {
                candidate_id: candidate.candidate_id.clone(),
                // Transport errors can echo the URL; scrub the secret.
                detail: e
                    .to_string()
                    .replace(&candidate.raw_text, &mask_secret(&candidate.raw_text, 0)),
            })?;
        let status = resp.status().as_u16();
        Ok(ProbeResult {
            candidate_id: candidate.candidate_id.clone(),
            outcome: self.outcome_of_status(status),
            status_code: Some(status),
            note: "live".to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{FilterStage, FilterVerdict};
    use crate::gateway::LogicalClock;
    use crate::registry::Registry;

    fn candidate(text: &str) -> CandidateSecret {
        CandidateSecret {
            candidate_id: "case#1/mock/1/0".to_string(),
            case_id: "case#1".to_string(),
            backend_id: "mock".to_string(),
            rank: 1,
            raw_text: text.to_string(),
            stripped_text: text.to_string(),
            entropy_per_char: 3.0,
            verdicts: vec![FilterVerdict {
                stage: FilterStage::Regex,
                passed: true,
                reason: "ok".to_string(),
            }],
            plausible: true,
        }
    }

    fn stripe_spec(mode: ProbeMode, ack: bool) -> Result<ProbeSpec, ProbeError> {
        let registry = Registry::builtin();
        let spec = registry.get("stripe_test_secret_key").unwrap();
        ProbeSpec::from_registry(spec, mode, ack)
    }

    #[test]
    fn masking_keeps_prefix_plus_six() {
        let masked = mask_secret("sk_test_abcdef123456789012345678", 8);
        assert_eq!(masked, format!("sk_test_abcdef{}", "*".repeat(18)));
        assert_eq!(masked.len(), "sk_test_abcdef123456789012345678".len());
        assert_eq!(mask_secret("short", 8), "short");
    }

    #[test]
    fn dry_run_never_attempts_and_masks_the_preview() {
        let spec = stripe_spec(ProbeMode::DryRun, false).unwrap();
        let mut prober = Prober::new(spec, Box::new(LogicalClock::default()), 0);
        let cand = candidate("sk_test_abcdef123456789012345678");
        let result = prober.probe(&cand).unwrap();
        assert_eq!(result.outcome, ProbeOutcome::NotAttempted);
        assert!(result.note.contains("sk_test_abcdef"));
        assert!(!result.note.contains("123456789012345678"));
    }

    #[test]
    fn stub_fixture_decides_outcomes() {
        let spec = stripe_spec(ProbeMode::Stub, false).unwrap();
        let good = "sk_test_abcdef123456789012345678";
        let fixture = StubFixture::accepting([good.to_string()]);
        let mut prober =
            Prober::new(spec, Box::new(LogicalClock::default()), 0).with_stub(fixture);
        assert_eq!(prober.probe(&candidate(good)).unwrap().outcome, ProbeOutcome::Valid);
        assert_eq!(
            prober
                .probe(&candidate("sk_test_zzzzzzzzzzzzzzzzzzzzzzzz"))
                .unwrap()
                .outcome,
            ProbeOutcome::Invalid
        );
    }

    #[test]
    fn live_gates_enforced_independently() {
        // Gate 1+2: validatable type, but no acknowledgment.
        assert!(matches!(
            stripe_spec(ProbeMode::Live, false),
            Err(ProbeError::EthicsGate { .. })
        ));
        // Gate 3: acknowledgment alone does not unlock non-validatable types.
        let registry = Registry::builtin();
        let aws = registry.get("aws_access_key_id").unwrap();
        assert!(matches!(
            ProbeSpec::from_registry(aws, ProbeMode::Live, true),
            Err(ProbeError::EthicsGate { .. })
        ));
        // Both satisfied: construction succeeds (no traffic yet).
        assert!(stripe_spec(ProbeMode::Live, true).is_ok());
    }

    #[test]
    fn non_plausible_candidates_refused() {
        let spec = stripe_spec(ProbeMode::DryRun, false).unwrap();
        let mut prober = Prober::new(spec, Box::new(LogicalClock::default()), 0);
        let mut cand = candidate("sk_test_abcdef123456789012345678");
        cand.plausible = false;
        assert!(matches!(
            prober.probe(&cand),
            Err(ProbeError::NotPlausible(_))
        ));
    }

    #[test]
    fn results_serialize_without_plaintext() {
        let spec = stripe_spec(ProbeMode::Stub, false).unwrap();
        let fixture = StubFixture::accepting([]);
        let mut prober =
            Prober::new(spec, Box::new(LogicalClock::default()), 0).with_stub(fixture);
        let secret = "sk_test_abcdef123456789012345678";
        let result = prober.probe(&candidate(secret)).unwrap();
        let json = serde_json::to_string(&result).unwrap();
        assert!(!json.contains(secret));
        assert!(json.contains("case#1/mock/1/0"));
    }
}
