//! Interactive annotation sessions: accumulated clicks, predictions and JSON snapshots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{render_guidance_pair, Click, ClickKind, ClickList, MAX_CLICKS_PER_KIND};
use crate::inference::{Pipeline, Provenance};
use crate::io::CaseData;
use crate::metrics::{Connectivity, SegMetrics};

/// Body of `POST /sessions/{id}/clicks`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRequest {
    pub pos: [usize; 3],
    pub kind: ClickKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub session_id: String,
    pub mask_version: u64,
    pub k: usize,
    /// Absent for cases without ground truth.
    pub metrics: Option<SegMetrics>,
    pub foreground_voxels: usize,
    pub provenance: Provenance,
}

/// Full session JSON, also the snapshot format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub case_id: String,
    pub clicks: Vec<Click>,
    pub mask_version: u64,
    pub latest: Option<PredictResponse>,
}

pub struct Session {
    id: String,
    case: Arc<CaseData>,
    clicks: ClickList,
    mask_version: u64,
    latest: Option<(PredictResponse, Array3<bool>)>,
}

impl Session {
    pub fn state(&self) -> SessionState {
        SessionState {
            id: self.id.clone(),
            case_id: self.case.id.clone(),
            clicks: self.clicks.clicks().to_vec(),
            mask_version: self.mask_version,
            latest: self.latest.as_ref().map(|(r, _)| r.clone()),
        }
    }

    pub fn clicks(&self) -> &ClickList {
        &self.clicks
    }

    pub fn case(&self) -> &CaseData {
        &self.case
    }

    pub fn latest_mask(&self) -> Option<&Array3<bool>> {
        self.latest.as_ref().map(|(_, m)| m)
    }

    /// Click count handed to the model: the larger per-kind count.
    pub fn k(&self) -> usize {
        self.clicks
            .count(ClickKind::Foreground)
            .max(self.clicks.count(ClickKind::Background))
    }

    /// Gaussian guidance maps of the accumulated clicks.
    pub fn guidance_maps(&self, pipeline: &Pipeline) -> Result<(Array3<f32>, Array3<f32>)> {
        render_guidance_pair(&self.clicks, &pipeline.config.guidance)
    }
}

/// All open sessions over a fixed case set and pipeline.
///
/// Each session sits behind its own mutex so its mutations are applied in
/// order; predictions additionally pass through a single gate.
pub struct SessionStore {
    cases: BTreeMap<String, Arc<CaseData>>,
    pipeline: Arc<Pipeline>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: Mutex<u64>,
    predict_gate: Mutex<()>,
    snapshot_dir: Option<PathBuf>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl SessionStore {
    pub fn new(cases: Vec<CaseData>, pipeline: Pipeline, snapshot_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(dir) = &snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut map = BTreeMap::new();
        for c in cases {
            if map.contains_key(&c.id) {
                return Err(Error::InvalidArgument(format!("duplicate case id {}", c.id)));
            }
            map.insert(c.id.clone(), Arc::new(c));
        }
        Ok(SessionStore {
            cases: map,
            pipeline: Arc::new(pipeline),
            sessions: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(1),
            predict_gate: Mutex::new(()),
            snapshot_dir,
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases.keys().cloned().collect()
    }

    pub fn case(&self, id: &str) -> Result<Arc<CaseData>> {
        self.cases
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownName(format!("case {id}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownName(format!("session {id}")))
    }

    /// Runs `f` with the session locked.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&Session) -> T) -> Result<T> {
        let s = self.session(id)?;
        let guard = lock(&s);
        Ok(f(&guard))
    }

    pub fn create(&self, case_id: &str) -> Result<SessionState> {
        let case = self.case(case_id)?;
        let id = {
            let mut n = lock(&self.next_id);
            let id = format!("s{:06}", *n);
            *n += 1;
            id
        };
        let session = Session {
            id: id.clone(),
            clicks: ClickList::new(*case.grid()),
            case,
            mask_version: 0,
            latest: None,
        };
        let state = session.state();
        self.persist(&state)?;
        lock(&self.sessions).insert(id, Arc::new(Mutex::new(session)));
        Ok(state)
    }

    pub fn state(&self, id: &str) -> Result<SessionState> {
        self.with_session(id, Session::state)
    }

    pub fn add_click(&self, id: &str, req: ClickRequest) -> Result<Click> {
        let s = self.session(id)?;
        let mut guard = lock(&s);
        let click = guard.clicks.push(req.kind, req.pos)?;
        self.persist(&guard.state())?;
        Ok(click)
    }

    /// Removes the most recent click; `None` when there was none.
    pub fn undo(&self, id: &str) -> Result<Option<Click>> {
        let s = self.session(id)?;
        let mut guard = lock(&s);
        let c = guard.clicks.pop_last();
        if c.is_some() {
            self.persist(&guard.state())?;
        }
        Ok(c)
    }

    /// Predicts with the accumulated clicks and stores the mask as a new version.
    pub fn predict(&self, id: &str) -> Result<PredictResponse> {
        let s = self.session(id)?;
        let mut guard = lock(&s);
        let k = guard.k();
        debug_assert!(k <= MAX_CLICKS_PER_KIND);
        let pred = {
            let _gate = lock(&self.predict_gate);
            self.pipeline.predict_case(&guard.case, Some(&guard.clicks), k)?
        };
        let mask = pred.mask.mask();
        let metrics = match &guard.case.lesion_gt {
            Some(gt) => Some(SegMetrics::compute(
                mask.view(),
                gt.mask().view(),
                guard.case.grid(),
                Connectivity::TwentySix,
            )?),
            None => None,
        };
        guard.mask_version += 1;
        let resp = PredictResponse {
            session_id: guard.id.clone(),
            mask_version: guard.mask_version,
            k,
            metrics,
            foreground_voxels: mask.iter().filter(|&&v| v).count(),
            provenance: pred.provenance,
        };
        guard.latest = Some((resp.clone(), mask));
        self.persist(&guard.state())?;
        Ok(resp)
    }

    fn persist(&self, state: &SessionState) -> Result<()> {
        let Some(dir) = &self.snapshot_dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.json", state.id));
        let tmp = dir.join(format!("{}.json.tmp", state.id));
        std::fs::write(&tmp, serde_json::to_string_pretty(state)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Reopens sessions from snapshots, replaying their clicks. Masks are
    /// recomputed with [`SessionStore::predict`] on demand.
    pub fn restore(&self) -> Result<usize> {
        let Some(dir) = &self.snapshot_dir else {
            return Ok(0);
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut restored = 0;
        for p in paths {
            let state = read_snapshot(&p)?;
            let case = self.case(&state.case_id)?;
            let clicks = ClickList::from_clicks(*case.grid(), state.clicks.clone())?;
            let n: u64 = state.id.trim_start_matches('s').parse().unwrap_or(0);
            {
                let mut next = lock(&self.next_id);
                *next = (*next).max(n + 1);
            }
            let session = Session {
                id: state.id.clone(),
                case,
                clicks,
                mask_version: state.mask_version,
                latest: None,
            };
            lock(&self.sessions).insert(state.id, Arc::new(Mutex::new(session)));
            restored += 1;
        }
        Ok(restored)
    }
}

pub fn read_snapshot(path: &Path) -> Result<SessionState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
