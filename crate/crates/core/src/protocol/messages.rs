//! Wire format of client uploads and server broadcasts.
//!
//! Every payload is a checkpoint container whose manifest may only name
//! trainable shared parameters: `visual.*` and `text.*` going up,
//! `task<t>.*` and `text.*` coming down.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::aggregation::ClientUpdate;
use crate::checkpoint::{read_manifest, Checkpoint, Manifest};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Upload,
    Broadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub round: usize,
    pub stage: Stage,
    /// Sender of an upload or recipient of a broadcast.
    pub client_id: usize,
    pub bytes: Vec<u8>,
}

/// Server bundle for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub round: usize,
    pub stage: Stage,
    pub client_id: usize,
    pub task_adapters: BTreeMap<usize, ParamSet>,
    pub text: ParamSet,
}

const UPLOAD_META: &[&str] = &["client_id", "kind", "round", "sample_count", "stage", "task_id"];
const BROADCAST_META: &[&str] = &["client_id", "kind", "round", "stage"];

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Protocol(format!("message metadata lacks `{key}`")))
}

fn stage_of(tag: usize) -> Result<Stage> {
    match tag {
        1 => Ok(Stage::One),
        2 => Ok(Stage::Two),
        other => Err(Error::Protocol(format!("unknown stage tag {other}"))),
    }
}

impl RoundMessage {
    pub fn upload(u: &ClientUpdate) -> Self {
        let mut p = ParamSet::new();
        p.extend_prefixed("visual", &u.visual_params);
        p.extend_prefixed("text", &u.text_params);
        let ck = Checkpoint::new(p)
            .with_meta("kind", "upload")
            .with_meta("client_id", u.client_id)
            .with_meta("task_id", u.task_id)
            .with_meta("sample_count", u.sample_count)
            .with_meta("round", u.round)
            .with_meta("stage", u.stage.tag());
        Self { kind: MessageKind::Upload, round: u.round, stage: u.stage, client_id: u.client_id, bytes: ck.encode() }
    }

    pub fn broadcast(b: &Broadcast) -> Self {
        let mut p = ParamSet::new();
        for (t, a) in &b.task_adapters {
            p.extend_prefixed(&format!("task{t}"), a);
        }
        p.extend_prefixed("text", &b.text);
        let ck = Checkpoint::new(p)
            .with_meta("kind", "broadcast")
            .with_meta("client_id", b.client_id)
            .with_meta("round", b.round)
            .with_meta("stage", b.stage.tag());
        Self { kind: MessageKind::Broadcast, round: b.round, stage: b.stage, client_id: b.client_id, bytes: ck.encode() }
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        read_manifest(&self.bytes)
    }

    pub fn decode_upload(&self) -> Result<ClientUpdate> {
        if self.kind != MessageKind::Upload {
            return Err(Error::Protocol("not an upload".into()));
        }
        check_payload(self)?;
        let ck = Checkpoint::decode(&self.bytes)?;
        Ok(ClientUpdate {
            client_id: meta_usize(&ck, "client_id")?,
            task_id: meta_usize(&ck, "task_id")?,
            sample_count: meta_usize(&ck, "sample_count")?,
            visual_params: ck.params.strip_prefix("visual"),
            text_params: ck.params.strip_prefix("text"),
            round: meta_usize(&ck, "round")?,
            stage: stage_of(meta_usize(&ck, "stage")?)?,
        })
    }

    pub fn decode_broadcast(&self) -> Result<Broadcast> {
        if self.kind != MessageKind::Broadcast {
            return Err(Error::Protocol("not a broadcast".into()));
        }
        check_payload(self)?;
        let ck = Checkpoint::decode(&self.bytes)?;
        let mut tasks: BTreeMap<usize, ParamSet> = BTreeMap::new();
        for (name, t) in ck.params.iter() {
            if let Some(rest) = name.strip_prefix("task") {
                let (id, field) = rest.split_once('.').expect("checked by check_payload");
                tasks.entry(id.parse().expect("checked")).or_default().insert(field, t.clone());
            }
        }
        Ok(Broadcast {
            round: meta_usize(&ck, "round")?,
            stage: stage_of(meta_usize(&ck, "stage")?)?,
            client_id: meta_usize(&ck, "client_id")?,
            task_adapters: tasks,
            text: ck.params.strip_prefix("text"),
        })
    }
}

/// Enforces the privacy contract on a serialized message: only shared
/// adapter tensors and routing metadata, never client adapters, samples,
/// labels, gradients or optimizer moments.
pub fn check_payload(msg: &RoundMessage) -> Result<()> {
    let m = msg.manifest()?;
    let allowed_meta = match msg.kind {
        MessageKind::Upload => UPLOAD_META,
        MessageKind::Broadcast => BROADCAST_META,
    };
    if let Some(k) = m.meta.keys().find(|k| !allowed_meta.contains(&k.as_str())) {
        return Err(Error::Protocol(format!("metadata key `{k}` is not allowed in a message")));
    }
    for e in &m.entries {
        let ok = match msg.kind {
            MessageKind::Upload => e.name.starts_with("visual.") || e.name.starts_with("text."),
            MessageKind::Broadcast => {
                e.name.starts_with("text.")
                    || e.name
                        .strip_prefix("task")
                        .and_then(|r| r.split_once('.'))
                        .is_some_and(|(id, _)| !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()))
            }
        };
        let forbidden = ["client", "sample", "feature", "label", "answer", "grad", "moment"]
            .iter()
            .any(|w| e.name.contains(w));
        if !ok || forbidden {
            return Err(Error::Protocol(format!("tensor `{}` may not leave its owner", e.name)));
        }
    }
    Ok(())
}

/// In-process queue standing in for a network, with byte accounting.
#[derive(Debug, Default)]
pub struct Transport {
    queue: VecDeque<RoundMessage>,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub messages: usize,
}

impl Transport {
    pub fn send(&mut self, msg: RoundMessage) -> Result<()> {
        check_payload(&msg)?;
        match msg.kind {
            MessageKind::Upload => self.bytes_up += msg.size(),
            MessageKind::Broadcast => self.bytes_down += msg.size(),
        }
        self.messages += 1;
        self.queue.push_back(msg);
        Ok(())
    }

    pub fn drain(&mut self, kind: MessageKind) -> Vec<RoundMessage> {
        let (take, keep): (Vec<_>, Vec<_>) = self.queue.drain(..).partition(|m| m.kind == kind);
        self.queue = keep.into();
        take
    }
}
