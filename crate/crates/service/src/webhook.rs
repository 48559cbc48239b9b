//! At-least-once push of new recommendations to per-home webhook URLs.
//!
//! Each delivery carries the recommendation id as `Idempotency-Key`.
//! Acknowledged ids are appended to a file so that a restart re-sends only
//! what was never acknowledged.

use std::collections::{BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ecohabit_core::domain::Recommendation;
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::error::ServiceError;
use crate::service::Service;

pub const ACK_FILE: &str = "webhook-acked.txt";
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

struct AckLog {
    path: PathBuf,
    acked: Mutex<BTreeSet<String>>,
}

impl AckLog {
    fn open(path: PathBuf) -> Result<Self, ServiceError> {
        let acked = match std::fs::read_to_string(&path) {
            Ok(text) => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeSet::new(),
            Err(e) => return Err(ServiceError::Config(format!("{}: {e}", path.display()))),
        };
        Ok(Self {
            path,
            acked: Mutex::new(acked),
        })
    }

    fn contains(&self, id: &str) -> bool {
        self.acked.lock().unwrap_or_else(|p| p.into_inner()).contains(id)
    }

    fn record(&self, id: &str) {
        let mut acked = self.acked.lock().unwrap_or_else(|p| p.into_inner());
        if !acked.insert(id.to_string()) {
            return;
        }
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| writeln!(f, "{id}"));
        if let Err(e) = written {
            tracing::warn!(path = %self.path.display(), error = %e, "cannot record webhook ack");
        }
    }
}

/// Handle to the delivery workers.
#[derive(Clone)]
pub struct Deliveries {
    senders: HashMap<String, UnboundedSender<Recommendation>>,
}

impl Deliveries {
    /// Starts one worker per configured home and queues every issued
    /// recommendation not yet acknowledged. `None` without webhooks. Must
    /// run inside a tokio runtime.
    pub fn start(svc: &Service) -> Result<Option<Self>, ServiceError> {
        let cfg = svc.config();
        if cfg.webhooks.is_empty() {
            return Ok(None);
        }
        let acks = Arc::new(AckLog::open(cfg.state_dir().join(ACK_FILE))?);
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut senders = HashMap::new();
        for (home, url) in &cfg.webhooks {
            let (tx, rx) = unbounded_channel();
            for rec in svc.issued_for(home) {
                if !acks.contains(&rec.recommendation_id) {
                    let _ = tx.send(rec);
                }
            }
            tokio::spawn(worker(client.clone(), url.clone(), rx, acks.clone()));
            senders.insert(home.clone(), tx);
        }
        Ok(Some(Self { senders }))
    }

    pub fn enqueue(&self, recs: Vec<Recommendation>) {
        for rec in recs {
            if let Some(tx) = self.senders.get(&rec.home_id) {
                let _ = tx.send(rec);
            }
        }
    }
}

async fn worker(
    client: reqwest::Client,
    url: String,
    mut rx: UnboundedReceiver<Recommendation>,
    acks: Arc<AckLog>,
) {
    while let Some(rec) = rx.recv().await {
        let mut delay = Duration::from_millis(200);
        loop {
            let sent = client
                .post(&url)
                .header(IDEMPOTENCY_HEADER, &rec.recommendation_id)
                .json(&rec)
                .send()
                .await;
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    acks.record(&rec.recommendation_id);
                    break;
                }
                Ok(resp) => {
                    tracing::warn!(url = %url, id = %rec.recommendation_id, status = resp.status().as_u16(), "webhook rejected")
                }
                Err(e) => tracing::warn!(url = %url, id = %rec.recommendation_id, error = %e, "webhook failed"),
            }
            tokio::time::sleep(delay).await;
            delay = (delay * 2).min(Duration::from_secs(30));
        }
    }
}
