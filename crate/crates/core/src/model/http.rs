//! Blocking HTTP client for a completion endpoint.
//!
//! Wire protocol: POST the JSON body
//! `{"prompt": .., "temperature": 0.0, "max_tokens": .., "stop": null}`
//! and read back `{"text": ".."}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::ReportRecord;
use crate::model::{CompletionRequest, ModelError, ReportModel};
use crate::prompting::TemplateVariant;

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    stop: &'a Option<Vec<String>>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Client for a real completion endpoint. Transport failures and 5xx
/// statuses are retried with exponential backoff; other failures are not.
#[derive(Debug, Clone)]
pub struct HttpModel {
    endpoint: String,
    retries: u32,
    backoff_base: Duration,
    timeout: Duration,
}

impl HttpModel {
    pub const DEFAULT_RETRIES: u32 = 3;
    pub const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(500);
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpModel {
            endpoint: endpoint.into(),
            retries: Self::DEFAULT_RETRIES,
            backoff_base: Self::DEFAULT_BACKOFF_BASE,
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Overrides the delay before the first retry (doubling afterwards).
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn snippet(body: &str) -> String {
        const LIMIT: usize = 200;
        if body.chars().count() <= LIMIT {
            body.to_string()
        } else {
            let cut: String = body.chars().take(LIMIT).collect();
            format!("{cut}…")
        }
    }
}

impl ReportModel for HttpModel {
    fn name(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn complete(
        &self,
        report: &ReportRecord,
        request: &CompletionRequest,
        _variant: TemplateVariant,
    ) -> Result<String, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|err| ModelError::Transport {
                report_id: report.id.clone(),
                message: format!("failed to build HTTP client: {err}"),
            })?;
        let wire = WireRequest {
            prompt: &request.prompt,
            temperature: request.temperature(),
            max_tokens: request.max_tokens,
            stop: &request.stop,
        };

        let mut last_failure: Option<ModelError> = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match client.post(&self.endpoint).json(&wire).send() {
                Err(err) => {
                    last_failure = Some(ModelError::Transport {
                        report_id: report.id.clone(),
                        message: err.to_string(),
                    });
                }
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let body = response.text().map_err(|err| ModelError::Transport {
                            report_id: report.id.clone(),
                            message: format!("failed to read response body: {err}"),
                        })?;
                        return serde_json::from_str::<WireResponse>(&body)
                            .map(|wire| wire.text)
                            .map_err(|err| {
                                ModelError::MalformedResponse(format!(
                                    "{err} in body '{}'",
                                    Self::snippet(&body)
                                ))
                            });
                    }
                    let detail = Self::snippet(&response.text().unwrap_or_default());
                    let failure = ModelError::Protocol {
                        status: status.as_u16(),
                        detail,
                    };
                    if status.is_server_error() {
                        last_failure = Some(failure);
                    } else {
                        return Err(failure);
                    }
                }
            }
        }
        Err(last_failure.expect("at least one attempt always runs"))
    }
}
