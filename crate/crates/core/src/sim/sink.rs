//! Upload targets for simulated devices.

use std::future::Future;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::alerting::AlertEvent;
use crate::ingest::{AlertReport, Service, UpdateRequest};
use crate::timefmt;

/// One `writeFields` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub channel_id: u64,
    pub write_key: String,
    /// `(N, value)` for each `fieldN`, values as decimal strings.
    pub fields: Vec<(usize, String)>,
    pub created_at: DateTime<Utc>,
}

impl Upload {
    fn form(&self) -> Vec<(String, String)> {
        let mut form = vec![("api_key".to_string(), self.write_key.clone())];
        form.extend(self.fields.iter().map(|(i, v)| (format!("field{i}"), v.clone())));
        form.push(("created_at".into(), timefmt::format_seconds(&self.created_at)));
        form
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum UploadOutcome {
    /// HTTP 200; the body carried the new entry id.
    Accepted {
        entry_id: u64,
    },
    /// Any other HTTP status.
    Rejected {
        http_status: u16,
        body: String,
    },
    /// The request never completed.
    Failed {
        error: String,
    },
    Offline,
}

impl UploadOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted { .. })
    }

    /// Firmware rule: only HTTP 200 counts as success.
    pub fn from_http(status: u16, body: String) -> Self {
        if status == 200 {
            match body.trim().parse::<u64>() {
                Ok(id) if id > 0 => Self::Accepted { entry_id: id },
                _ => Self::Rejected {
                    http_status: status,
                    body,
                },
            }
        } else {
            Self::Rejected {
                http_status: status,
                body,
            }
        }
    }
}

/// Result of reporting an alarm transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReportOutcome {
    Stored,
    Rejected { http_status: u16, body: String },
    Failed { error: String },
    Offline,
}

pub trait UploadSink: Send + Sync {
    fn upload(&self, upload: &Upload) -> impl Future<Output = UploadOutcome> + Send;

    /// Sends one alert event to the channel's alert log.
    fn report_alert(&self, _write_key: &str, _event: &AlertEvent) -> impl Future<Output = ReportOutcome> + Send {
        async { ReportOutcome::Offline }
    }
}

impl<S: UploadSink> UploadSink for Arc<S> {
    fn upload(&self, upload: &Upload) -> impl Future<Output = UploadOutcome> + Send {
        (**self).upload(upload)
    }

    fn report_alert(&self, write_key: &str, event: &AlertEvent) -> impl Future<Output = ReportOutcome> + Send {
        (**self).report_alert(write_key, event)
    }
}

fn alert_report(event: &AlertEvent) -> AlertReport {
    AlertReport {
        kind: event.kind,
        ppm: event.ppm,
        at: Some(event.at),
    }
}

/// No network: every upload is reported as offline.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineSink;

impl UploadSink for OfflineSink {
    async fn upload(&self, _upload: &Upload) -> UploadOutcome {
        UploadOutcome::Offline
    }
}

/// Posts form-encoded writes to `<base>/update` and alert events to
/// `<base>/channels/<id>/alerts`.
#[derive(Debug, Clone)]
pub struct HttpSink {
    client: reqwest::Client,
    base: String,
}

impl HttpSink {
    pub fn new(base_url: &str) -> Self {
        Self {
            client: reqwest::Client::new(),
            base: base_url.trim_end_matches('/').to_string(),
        }
    }
}

impl UploadSink for HttpSink {
    async fn upload(&self, upload: &Upload) -> UploadOutcome {
        let url = format!("{}/update", self.base);
        let sent = self.client.post(url).form(&upload.form()).send().await;
        match sent {
            Ok(resp) => {
                let status = resp.status().as_u16();
                match resp.text().await {
                    Ok(body) => UploadOutcome::from_http(status, body),
                    Err(e) => UploadOutcome::Failed { error: e.to_string() },
                }
            }
            Err(e) => UploadOutcome::Failed { error: e.to_string() },
        }
    }

    async fn report_alert(&self, write_key: &str, event: &AlertEvent) -> ReportOutcome {
        let url = format!("{}/channels/{}/alerts", self.base, event.channel_id);
        let sent = self
            .client
            .post(url)
            .header("X-THINGSPEAKAPIKEY", write_key)
            .json(&alert_report(event))
            .send()
            .await;
        match sent {
            Ok(resp) if resp.status().as_u16() == 201 => ReportOutcome::Stored,
            Ok(resp) => {
                let http_status = resp.status().as_u16();
                match resp.text().await {
                    Ok(body) => ReportOutcome::Rejected { http_status, body },
                    Err(e) => ReportOutcome::Failed { error: e.to_string() },
                }
            }
            Err(e) => ReportOutcome::Failed { error: e.to_string() },
        }
    }
}

/// Calls an in-process service directly, mapping errors to their HTTP status.
#[derive(Clone)]
pub struct ServiceSink {
    service: Arc<Service>,
}

impl ServiceSink {
    pub fn new(service: Arc<Service>) -> Self {
        Self { service }
    }
}

impl UploadSink for ServiceSink {
    async fn upload(&self, upload: &Upload) -> UploadOutcome {
        let req = UpdateRequest {
            api_key: upload.write_key.clone(),
            fields: upload.fields.clone(),
            created_at: Some(upload.created_at),
        };
        let svc = self.service.clone();
        let now = Utc::now();
        match tokio::task::spawn_blocking(move || svc.handle_update(&req, now)).await {
            Ok(Ok(id)) => UploadOutcome::from_http(200, id.to_string()),
            Ok(Err(e)) => UploadOutcome::from_http(e.status(), "0".into()),
            Err(e) => UploadOutcome::Failed { error: e.to_string() },
        }
    }

    async fn report_alert(&self, write_key: &str, event: &AlertEvent) -> ReportOutcome {
        let svc = self.service.clone();
        let key = write_key.to_string();
        let (channel_id, report) = (event.channel_id, alert_report(event));
        let now = Utc::now();
        match tokio::task::spawn_blocking(move || svc.handle_alert(channel_id, &key, &report, now)).await {
            Ok(Ok(_)) => ReportOutcome::Stored,
            Ok(Err(e)) => ReportOutcome::Rejected {
                http_status: e.status(),
                body: e.to_string(),
            },
            Err(e) => ReportOutcome::Failed { error: e.to_string() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn firmware_success_rule() {
        assert_eq!(
            UploadOutcome::from_http(200, "17".into()),
            UploadOutcome::Accepted { entry_id: 17 }
        );
        assert!(!UploadOutcome::from_http(200, "0".into()).is_accepted());
        assert!(!UploadOutcome::from_http(429, "0".into()).is_accepted());
    }

    #[tokio::test]
    async fn unreachable_host_fails_softly() {
        let sink = HttpSink::new("http://127.0.0.1:9");
        let up = Upload {
            channel_id: 1,
            write_key: "K".into(),
            fields: vec![(1, "1".into())],
            created_at: Utc::now(),
        };
        assert!(matches!(sink.upload(&up).await, UploadOutcome::Failed { .. }));
    }
}
