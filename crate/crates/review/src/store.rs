use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use cirlab_core::{Tokenizer, WordPunctTokenizer, TOKEN_LIMIT};
use serde::{Deserialize, Serialize};

use crate::types::{Decision, ItemState, Payload, ReviewItem, Stage, Verdict};
use crate::ReviewError;

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    Enqueue { item: ReviewItem },
    Decide { decision: Decision },
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    /// Log lines already folded into `items`.
    events: usize,
    next_seq: u64,
    items: Vec<ReviewItem>,
}

#[derive(Debug, Default)]
struct State {
    items: BTreeMap<String, ReviewItem>,
    next_seq: u64,
    events: usize,
}

impl State {
    fn apply(&mut self, event: Event) -> Result<(), String> {
        match event {
            Event::Enqueue { item } => {
                if self.items.contains_key(&item.id) {
                    return Err(format!("duplicate item {}", item.id));
                }
                self.next_seq = self.next_seq.max(item.created_at + 1);
                self.items.insert(item.id.clone(), item);
            }
            Event::Decide { decision } => {
                let item = self
                    .items
                    .get_mut(&decision.item_id)
                    .ok_or_else(|| format!("decision for unknown item {}", decision.item_id))?;
                if item.state == ItemState::Decided {
                    return Err(format!("second decision for {}", decision.item_id));
                }
                item.state = ItemState::Decided;
                if decision.verdict == Verdict::Edit {
                    if let Some(t) = &decision.edited_text {
                        item.payload.text = t.clone();
                    }
                }
                item.decision = Some(decision);
            }
        }
        self.events += 1;
        Ok(())
    }
}

#[derive(Clone)]
pub struct StoreConfig {
    pub token_limit: usize,
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            token_limit: TOKEN_LIMIT,
            tokenizer: Arc::new(WordPunctTokenizer),
        }
    }
}

impl std::fmt::Debug for StoreConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreConfig")
            .field("token_limit", &self.token_limit)
            .field("tokenizer", &self.tokenizer.name())
            .finish()
    }
}

struct Inner {
    state: State,
    log: Option<File>,
}

/// Thread-safe review queue store. With a directory it is durable: every
/// change is appended and flushed to the event log before the call returns.
pub struct ReviewStore {
    dir: Option<PathBuf>,
    config: StoreConfig,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for ReviewStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReviewStore").field("dir", &self.dir).field("config", &self.config).finish()
    }
}

fn read_log(path: &Path, state: &mut State) -> Result<(), ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let skip = state.events;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if n < skip {
            continue;
        }
        let corrupt = |detail: String| ReviewError::Corrupt { line: n + 1, detail };
        let event: Event = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        state.apply(event).map_err(corrupt)?;
    }
    Ok(())
}

impl ReviewStore {
    /// A store that lives only in memory.
    pub fn in_memory(config: StoreConfig) -> Self {
        Self {
            dir: None,
            config,
            inner: Mutex::new(Inner {
                state: State::default(),
                log: None,
            }),
        }
    }

    /// Opens (or creates) a durable store in `dir`: loads the snapshot, then
    /// replays the log lines written after it.
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self, ReviewError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut state = State::default();
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snap_path)?)?;
            state.events = snap.events;
            state.next_seq = snap.next_seq;
            state.items = snap.items.into_iter().map(|i| (i.id.clone(), i)).collect();
        }
        let log_path = dir.join(LOG_FILE);
        read_log(&log_path, &mut state)?;
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self {
            dir: Some(dir),
            config,
            inner: Mutex::new(Inner { state, log: Some(log) }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn record(inner: &mut Inner, event: Event) -> Result<(), ReviewError> {
        if let Some(log) = inner.log.as_mut() {
            let mut line = serde_json::to_vec(&event)?;
            line.push(b'\n');
            log.write_all(&line)?;
            log.sync_data()?;
        }
        inner
            .state
            .apply(event)
            .map_err(|detail| ReviewError::Corrupt { line: 0, detail })
    }

    /// Adds an open item and returns its id. One item per triplet and stage.
    pub fn enqueue(&self, stage: Stage, triplet_id: &str, payload: Payload) -> Result<String, ReviewError> {
        payload.validate(stage, self.config.token_limit)?;
        let id = ReviewItem::id_for(stage, triplet_id);
        let mut inner = self.lock();
        if inner.state.items.contains_key(&id) {
            return Err(ReviewError::Duplicate {
                triplet: triplet_id.to_string(),
                stage,
            });
        }
        let item = ReviewItem {
            id: id.clone(),
            stage,
            triplet_id: triplet_id.to_string(),
            payload,
            created_at: inner.state.next_seq,
            state: ItemState::Open,
            decision: None,
        };
        Self::record(&mut inner, Event::Enqueue { item })?;
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<ReviewItem> {
        self.lock().state.items.get(id).cloned()
    }

    pub fn item_for(&self, stage: Stage, triplet_id: &str) -> Option<ReviewItem> {
        self.get(&ReviewItem::id_for(stage, triplet_id))
    }

    /// Oldest open item of a stage, without claiming it.
    pub fn next(&self, stage: Stage) -> Option<ReviewItem> {
        self.lock()
            .state
            .items
            .values()
            .filter(|i| i.stage == stage && i.state == ItemState::Open)
            .min_by_key(|i| i.created_at)
            .cloned()
    }

    /// Open items per stage; every stage is present.
    pub fn open_counts(&self) -> BTreeMap<Stage, usize> {
        let mut out: BTreeMap<Stage, usize> = Stage::ALL.into_iter().map(|s| (s, 0)).collect();
        for i in self.lock().state.items.values() {
            if i.state == ItemState::Open {
                *out.get_mut(&i.stage).expect("all stages present") += 1;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lock().state.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every item in enqueue order.
    pub fn items(&self) -> Vec<ReviewItem> {
        let mut v: Vec<ReviewItem> = self.lock().state.items.values().cloned().collect();
        v.sort_by_key(|i| i.created_at);
        v
    }

    pub fn token_count(&self, text: &str) -> usize {
        self.config.tokenizer.count(text)
    }

    /// Records a decision. The first decision on an item wins; later ones get
    /// [`ReviewError::AlreadyDecided`].
    pub fn decide(&self, decision: Decision) -> Result<ReviewItem, ReviewError> {
        let mut inner = self.lock();
        let item = inner
            .state
            .items
            .get(&decision.item_id)
            .ok_or_else(|| ReviewError::NotFound(decision.item_id.clone()))?;
        if item.state == ItemState::Decided {
            return Err(ReviewError::AlreadyDecided(item.id.clone()));
        }
        if !item.stage.allows(decision.verdict) {
            return Err(ReviewError::InvalidVerdict {
                stage: item.stage,
                verdict: decision.verdict,
            });
        }
        match (&decision.verdict, &decision.edited_text) {
            (Verdict::Edit, None) => return Err(ReviewError::MissingEdit),
            (Verdict::Edit, Some(t)) => {
                if t.trim().is_empty() {
                    return Err(ReviewError::MissingEdit);
                }
                let count = self.config.tokenizer.count(t);
                if count > self.config.token_limit {
                    return Err(ReviewError::TokenLimit {
                        count,
                        limit: self.config.token_limit,
                    });
                }
            }
            (_, Some(_)) => return Err(ReviewError::UnexpectedEdit),
            (_, None) => {}
        }
        let id = decision.item_id.clone();
        Self::record(&mut inner, Event::Decide { decision })?;
        Ok(inner.state.items[&id].clone())
    }

    /// Writes the snapshot atomically. The log is kept whole for auditing; a
    /// reopen skips the lines the snapshot already covers.
    pub fn compact(&self) -> Result<(), ReviewError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let inner = self.lock();
        let snap = Snapshot {
            events: inner.state.events,
            next_seq: inner.state.next_seq,
            items: {
                let mut v: Vec<ReviewItem> = inner.state.items.values().cloned().collect();
                v.sort_by_key(|i| i.created_at);
                v
            },
        };
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&snap)?)?;
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    /// Decisions by triplet for one stage.
    pub fn decisions(&self, stage: Stage) -> HashMap<String, Decision> {
        self.lock()
            .state
            .items
            .values()
            .filter(|i| i.stage == stage)
            .filter_map(|i| i.decision.clone().map(|d| (i.triplet_id.clone(), d)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_payload() -> Payload {
        Payload {
            reference_id: "r".into(),
            reference_uri: "file:r".into(),
            target_id: "t".into(),
            target_uri: "file:t".into(),
            answers: Some([true, false, true]),
            ..Default::default()
        }
    }

    fn decision(id: &str, verdict: Verdict, text: Option<&str>) -> Decision {
        Decision {
            item_id: id.into(),
            verdict,
            edited_text: text.map(str::to_string),
            reviewer: "ann".into(),
            timestamp: 1,
        }
    }

    #[test]
    fn fifo_and_exactly_once() {
        let s = ReviewStore::in_memory(StoreConfig::default());
        assert!(s.next(Stage::PairCheck).is_none());
        let a = s.enqueue(Stage::PairCheck, "a", pair_payload()).unwrap();
        let b = s.enqueue(Stage::PairCheck, "b", pair_payload()).unwrap();
        assert_eq!(s.next(Stage::PairCheck).unwrap().id, a);
        assert_eq!(s.next(Stage::PairCheck).unwrap().id, a);
        s.decide(decision(&a, Verdict::Retain, None)).unwrap();
        assert_eq!(s.next(Stage::PairCheck).unwrap().id, b);
        assert!(matches!(
            s.decide(decision(&a, Verdict::Discard, None)),
            Err(ReviewError::AlreadyDecided(_))
        ));
        assert!(matches!(
            s.enqueue(Stage::PairCheck, "a", pair_payload()),
            Err(ReviewError::Duplicate { .. })
        ));
    }

    #[test]
    fn verdicts_follow_the_stage() {
        let s = ReviewStore::in_memory(StoreConfig::default());
        let a = s.enqueue(Stage::PairCheck, "a", pair_payload()).unwrap();
        assert!(matches!(
            s.decide(decision(&a, Verdict::Edit, Some("x"))),
            Err(ReviewError::InvalidVerdict { .. })
        ));
        let long = vec!["word"; 90].join(" ");
        let c = s
            .enqueue(
                Stage::Compress,
                "a",
                Payload {
                    text: long.clone(),
                    token_count: Some(90),
                    ..pair_payload()
                },
            )
            .unwrap();
        assert!(matches!(
            s.decide(decision(&c, Verdict::Retain, None)),
            Err(ReviewError::InvalidVerdict { .. })
        ));
        assert!(matches!(s.decide(decision(&c, Verdict::Edit, None)), Err(ReviewError::MissingEdit)));
        assert!(matches!(
            s.decide(decision(&c, Verdict::Edit, Some(&vec!["w"; 80].join(" ")))),
            Err(ReviewError::TokenLimit { count: 80, limit: 77 })
        ));
        let ok = vec!["w"; 60].join(" ");
        let item = s.decide(decision(&c, Verdict::Edit, Some(&ok))).unwrap();
        assert_eq!(item.state, ItemState::Decided);
        assert_eq!(item.payload.text, ok);
    }

    #[test]
    fn payloads_are_checked_per_stage() {
        let s = ReviewStore::in_memory(StoreConfig::default());
        let three_yes = Payload {
            answers: Some([true; 3]),
            ..pair_payload()
        };
        assert!(s.enqueue(Stage::PairCheck, "a", three_yes).is_err());
        let short = Payload {
            text: "short".into(),
            token_count: Some(1),
            ..pair_payload()
        };
        assert!(s.enqueue(Stage::Compress, "a", short).is_err());
        assert!(s.enqueue(Stage::Assess, "a", pair_payload()).is_err());
        assert!(s.is_empty());
    }
}
