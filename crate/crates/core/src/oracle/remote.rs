//! Client for an HTTP entailment service.
//!
//! One POST per ordered pair with body
//! `{"question": .., "premise": .., "hypothesis": ..}`; the reply must be
//! `{"relation": "entailment" | "neutral" | "contradiction"}` with an optional
//! `"scores"` map. Any non-200 status or schema violation is a
//! `MalformedResponse`; transport failures are retried and then reported as
//! `Unavailable`. Neither is ever mapped to "not equivalent".

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EquivalenceOracle, OracleResult};
use crate::error::OracleError;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
    /// Maximum number of in-flight requests across all callers.
    pub concurrency: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
            retries: 2,
            concurrency: 8,
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    question: &'a str,
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    relation: Option<String>,
    #[serde(default)]
    #[allow(dead_code)]
    scores: Option<HashMap<String, f64>>,
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteOracle {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
    name: String,
}

impl RemoteOracle {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let name = format!("remote:{}", config.endpoint);
        Self {
            gate: Gate::new(config.concurrency),
            config,
            agent,
            name,
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> OracleError {
        OracleError::MalformedResponse {
            endpoint: self.config.endpoint.clone(),
            reason: reason.into(),
        }
    }

    fn query(&self, body: &Request<'_>) -> OracleResult<String> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            let _permit = self.gate.acquire();
            match self.agent.post(&self.config.endpoint).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status != 200 {
                        return Err(self.malformed(format!("HTTP status {status}")));
                    }
                    let reply: Reply = resp.body_mut().read_json().map_err(|e| self.malformed(e.to_string()))?;
                    let relation = reply.relation.ok_or_else(|| self.malformed("missing \"relation\""))?;
                    return match relation.as_str() {
                        "entailment" | "neutral" | "contradiction" => Ok(relation),
                        other => Err(self.malformed(format!("unknown relation `{other}`"))),
                    };
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(OracleError::Unavailable {
            endpoint: self.config.endpoint.clone(),
            attempts,
            reason: last,
        })
    }
}

/// Builds a client; the endpoint is not contacted until the first judgment.
pub fn remote_oracle(endpoint: &str, timeout: Duration, retries: usize) -> RemoteOracle {
    RemoteOracle::new(RemoteConfig {
        timeout,
        retries,
        ..RemoteConfig::new(endpoint)
    })
}

impl EquivalenceOracle for RemoteOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn entails(&self, question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        let relation = self.query(&Request {
            question,
            premise,
            hypothesis,
        })?;
        Ok(relation == "entailment")
    }

    fn is_costly(&self) -> bool {
        true
    }
}
