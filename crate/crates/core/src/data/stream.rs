//! Session streams: the base session followed by few-shot novel sessions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corpus::Scene;
use crate::error::{Error, Result};
use crate::rng;

/// Base per-class train scenes must be at least this multiple of the shots.
pub const BASE_SHOT_RATIO: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    /// One session holding every novel class.
    SingleStep,
    /// One session per novel class.
    MultiStep,
}

impl StreamMode {
    pub fn tag(self) -> &'static str {
        match self {
            StreamMode::SingleStep => "single-step",
            StreamMode::MultiStep => "multi-step",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub classes: Vec<u32>,
    /// Scene ids.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStream {
    pub sessions: Vec<Session>,
    pub shots: usize,
    pub mode: StreamMode,
}

impl SessionStream {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn base_classes(&self) -> &[u32] {
        &self.sessions[0].classes
    }

    /// Classes of sessions `0..=session`.
    pub fn seen_classes(&self, session: usize) -> Vec<u32> {
        let mut out: Vec<u32> = self.sessions[..=session]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Classes introduced after the base session up to `session`.
    pub fn novel_classes(&self, session: usize) -> Vec<u32> {
        let mut out: Vec<u32> = self.sessions[1..=session]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamOptions {
    pub mode: StreamMode,
    pub shots: usize,
    /// Held-out test scenes per class.
    pub test_per_class: usize,
}

impl StreamOptions {
    pub fn new(mode: StreamMode, shots: usize) -> Self {
        Self {
            mode,
            shots,
            test_per_class: 10,
        }
    }
}

fn by_primary(corpus: &[Scene]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for s in corpus {
        map.entry(s.primary).or_default().push(s.id);
    }
    map
}

/// Builds the evaluation stream from a held-out fold. For every class the
/// first `test_per_class` shuffled scenes are test scenes and the rest form
/// the train pool; novel sessions take exactly `shots` scenes from the pool.
pub fn build_stream(
    corpus: &[Scene],
    base: &[u32],
    novel: &[u32],
    opts: StreamOptions,
    seed: u64,
) -> Result<SessionStream> {
    if opts.shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let pools = by_primary(corpus);
    let mut rng = rng::stream(seed, "stream");
    let mut split = BTreeMap::new();
    for &c in base.iter().chain(novel) {
        let mut ids = pools.get(&c).cloned().unwrap_or_default();
        ids.shuffle(&mut rng);
        let needed = opts.test_per_class + opts.shots;
        if ids.len() < needed {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} scenes, needs {needed}",
                ids.len()
            )));
        }
        let train = ids.split_off(opts.test_per_class);
        split.insert(c, (train, ids));
    }

    let min_base_pool = base.iter().map(|c| split[c].0.len()).min().unwrap_or(0);
    if !base.is_empty() && min_base_pool < BASE_SHOT_RATIO * opts.shots {
        return Err(Error::InsufficientData(format!(
            "base classes need {} train scenes for {}-shot sessions, smallest has {min_base_pool}",
            BASE_SHOT_RATIO * opts.shots,
            opts.shots
        )));
    }

    let mut sessions = vec![Session {
        classes: base.to_vec(),
        train: base.iter().flat_map(|c| split[c].0.clone()).collect(),
        test: base.iter().flat_map(|c| split[c].1.clone()).collect(),
    }];
    let groups: Vec<Vec<u32>> = match opts.mode {
        StreamMode::MultiStep => novel.iter().map(|&c| vec![c]).collect(),
        StreamMode::SingleStep if novel.is_empty() => Vec::new(),
        StreamMode::SingleStep => vec![novel.to_vec()],
    };
    for classes in groups {
        sessions.push(Session {
            train: classes
                .iter()
                .flat_map(|c| split[c].0[..opts.shots].to_vec())
                .collect(),
            test: classes.iter().flat_map(|c| split[c].1.clone()).collect(),
            classes,
        });
    }
    Ok(SessionStream {
        sessions,
        shots: opts.shots,
        mode: opts.mode,
    })
}

/// Pseudo-incremental sequence drawn from the base session's train pool.
/// A random subset of `tasks` classes become one-class pseudo-novel sessions;
/// the remaining majority forms the pseudo base session. Within each class
/// the train and test scenes are disjoint.
pub fn sample_pseudo_sequence(
    corpus: &[Scene],
    base: &Session,
    tasks: usize,
    shots: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<SessionStream> {
    let n = base.classes.len();
    if tasks >= n {
        return Err(Error::InvalidConfig(format!(
            "{tasks} pseudo sessions need more than {n} base classes"
        )));
    }
    if n - tasks <= tasks {
        return Err(Error::InvalidConfig(format!(
            "pseudo base of {} classes would not outnumber {tasks} pseudo-novel classes",
            n - tasks
        )));
    }
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "sequence");
    let mut classes = base.classes.clone();
    classes.shuffle(&mut rng);
    let (novel, pseudo_base) = classes.split_at(tasks);

    let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &id in &base.train {
        pools.entry(corpus[id].primary).or_default().push(id);
    }
    let mut take = |c: u32, need: usize| -> Result<(Vec<usize>, Vec<usize>)> {
        let mut ids = pools.get(&c).cloned().unwrap_or_default();
        if ids.len() < need + test_per_class {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} base train scenes, needs {}",
                ids.len(),
                need + test_per_class
            )));
        }
        ids.shuffle(&mut rng);
        let train = ids.split_off(test_per_class);
        Ok((train, ids))
    };

    let mut pseudo_base_sorted = pseudo_base.to_vec();
    pseudo_base_sorted.sort_unstable();
    let mut base_session = Session {
        classes: pseudo_base_sorted.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for &c in &pseudo_base_sorted {
        let (train, test) = take(c, shots)?;
        base_session.train.extend(train);
        base_session.test.extend(test);
    }
    let mut sessions = vec![base_session];
    for &c in novel {
        let (mut train, test) = take(c, shots)?;
        train.truncate(shots);
        sessions.push(Session {
            classes: vec![c],
            train,
            test,
        });
    }
    Ok(SessionStream {
        sessions,
        shots,
        mode: StreamMode::MultiStep,
    })
}
