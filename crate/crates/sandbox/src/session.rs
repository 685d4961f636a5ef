use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ays_core::agents::actor_critic::softmax;
use ays_core::agents::argmax;
use ays_core::dynamics::{fixed_points, PolicyAction};
use ays_core::env::{self, black_norm, Boundaries, EnvConfig, EpisodeState, Observation, TerminalCause};
use ays_core::kv::KvMap;
use ays_core::neural::{load_weights, HeadKind, MlpWeights};
use ays_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::protocol::{
    CheckpointInfo, CreateBody, CreatedBody, Envelope, Kind, ResetBody, StateBody, StepBody, SuggestionBody, UndoBody,
    PROTO,
};

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("{message}")]
    Invalid { message: String, field: Option<String> },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl SandboxError {
    fn invalid(message: impl Into<String>, field: Option<&str>) -> Self {
        SandboxError::Invalid {
            message: message.into(),
            field: field.map(str::to_string),
        }
    }

    pub fn field(&self) -> Option<String> {
        match self {
            SandboxError::Invalid { field, .. } => field.clone(),
            SandboxError::Core(CoreError::Config { key, .. }) => Some(key.clone()),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, SandboxError>;

#[derive(Debug, Clone)]
struct Year {
    state: EpisodeState,
    obs: Observation,
    action: Option<PolicyAction>,
    reward: f64,
    total_reward: f64,
    cause: TerminalCause,
}

#[derive(Debug, Clone)]
struct Loaded {
    name: String,
    net: MlpWeights,
}

/// One steerable episode with its full history.
#[derive(Debug, Clone)]
pub struct Session {
    env: EnvConfig,
    seed: u64,
    history: Vec<Year>,
    checkpoint: Option<Loaded>,
}

impl Session {
    fn new(env: EnvConfig, seed: u64, checkpoint: Option<Loaded>) -> Self {
        let mut s = Self {
            env,
            seed,
            history: Vec::new(),
            checkpoint,
        };
        s.restart(seed);
        s
    }

    fn restart(&mut self, seed: u64) {
        self.seed = seed;
        self.env = self.env.clone().with_seed(seed);
        let (state, obs) = env::reset_episode(&self.env, 0);
        self.history = vec![Year {
            state,
            obs,
            action: None,
            reward: 0.0,
            total_reward: 0.0,
            cause: TerminalCause::None,
        }];
    }

    pub fn year(&self) -> usize {
        self.history.len() - 1
    }

    fn current(&self) -> &Year {
        self.history.last().expect("history starts at year 0")
    }

    pub fn state_body(&self) -> StateBody {
        let y = self.current();
        StateBody {
            year: y.state.t,
            raw: y.state.raw,
            norm: y.state.norm(),
            action: y.action.map(|a| a.label().to_string()),
            reward: y.reward,
            total_reward: y.total_reward,
            cause: y.cause.as_str().to_string(),
            done: y.state.done,
        }
    }

    pub fn step(&mut self, action: PolicyAction) -> Result<StateBody> {
        let cur = self.current();
        if cur.state.done {
            return Err(SandboxError::invalid("episode finished", None));
        }
        let (state, outcome) = env::step(&cur.state, action, &self.env)?;
        let total_reward = cur.total_reward + outcome.reward;
        self.history.push(Year {
            state,
            obs: outcome.obs,
            action: Some(action),
            reward: outcome.reward,
            total_reward,
            cause: outcome.cause,
        });
        Ok(self.state_body())
    }

    pub fn undo(&mut self, to_year: usize) -> Result<StateBody> {
        if to_year >= self.year() {
            return Err(SandboxError::invalid(
                format!("cannot undo to year {to_year}: current year is {}", self.year()),
                Some("to_year"),
            ));
        }
        self.history.truncate(to_year + 1);
        Ok(self.state_body())
    }

    pub fn suggest(&self) -> Result<SuggestionBody> {
        let loaded = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| SandboxError::invalid("no checkpoint loaded", Some("checkpoint")))?;
        let net = &loaded.net;
        let out = net.forward_vec(self.current().obs.as_slice())?;
        let o = net.spec().output_dim;
        let code = argmax(&out[..o]);
        let (q_values, probabilities, value) = match net.spec().head {
            HeadKind::ActorCritic => (None, Some(softmax(&out[..o])), Some(out[o])),
            _ => (Some(out[..o].to_vec()), None, None),
        };
        Ok(SuggestionBody {
            year: self.year(),
            action: PolicyAction::from_index(code)?.label().to_string(),
            action_code: code,
            q_values,
            probabilities,
            value,
        })
    }

    fn created_body(&self) -> CreatedBody {
        CreatedBody {
            seed: self.seed,
            config: self
                .env
                .to_kv()
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            checkpoint: self.checkpoint.as_ref().map(|c| c.name.clone()),
            green_norm: fixed_points(&self.current().state.params).green_norm,
            black_norm: black_norm(&self.current().state.params),
            boundary_norm: Boundaries::PLANETARY.normalized(),
            state: self.state_body(),
        }
    }
}

struct Slot {
    session: Mutex<Session>,
    last_used: Mutex<Instant>,
}

/// All live sessions. Requests for one session are serialized by its lock;
/// different sessions proceed independently.
pub struct SessionManager {
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    ttl: Duration,
    checkpoint_dir: Option<PathBuf>,
}

impl SessionManager {
    pub fn new(ttl: Duration, checkpoint_dir: Option<PathBuf>) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            ttl,
            checkpoint_dir,
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, slot| now.saturating_duration_since(*slot.last_used.lock().unwrap()) <= self.ttl);
        before - map.len()
    }

    pub fn handle_text(&self, text: &str) -> String {
        let reply = match serde_json::from_str::<Envelope>(text) {
            Ok(req) => self.handle(req),
            Err(e) => Envelope::error(None, format!("malformed message: {e}"), None),
        };
        reply.to_text()
    }

    /// Produces exactly one reply for each request.
    pub fn handle(&self, req: Envelope) -> Envelope {
        let sid = req.session_id.clone();
        if req.proto != PROTO {
            return Envelope::error(
                sid,
                format!("unsupported protocol version {}", req.proto),
                Some("proto".into()),
            );
        }
        let result = match req.kind {
            Kind::Create => self.create(req.body),
            Kind::Step => self
                .with_session(&sid, |s| s.step(parse_action(body::<StepBody>(req.body)?.action)?))
                .map(|b| Envelope::new(Kind::State, sid.clone(), b)),
            Kind::Undo => self
                .with_session(&sid, |s| s.undo(body::<UndoBody>(req.body)?.to_year))
                .map(|b| Envelope::new(Kind::State, sid.clone(), b)),
            Kind::Reset => self
                .with_session(&sid, |s| {
                    let seed = body::<ResetBody>(req.body)?.seed.unwrap_or(s.seed);
                    s.restart(seed);
                    Ok(s.state_body())
                })
                .map(|b| Envelope::new(Kind::State, sid.clone(), b)),
            Kind::Suggest => self
                .with_session(&sid, |s| s.suggest())
                .map(|b| Envelope::new(Kind::Suggestion, sid.clone(), b)),
            other => Err(SandboxError::invalid(
                format!("`{}` is a reply kind, not a request", kind_name(other)),
                Some("kind"),
            )),
        };
        result.unwrap_or_else(|e| Envelope::error(sid, e.to_string(), e.field()))
    }

    fn create(&self, body_value: Value) -> Result<Envelope> {
        let b: CreateBody = body(body_value)?;
        let env = env_from_overrides(&b.overrides)?;
        let checkpoint = match &b.checkpoint {
            Some(name) => {
                let net = self.load_checkpoint(name)?;
                if net.spec().input_dim != env.observability.dim() {
                    return Err(SandboxError::Core(CoreError::SpecMismatch(format!(
                        "checkpoint `{name}` takes {} inputs, {} observations have {}",
                        net.spec().input_dim,
                        env.observability,
                        env.observability.dim()
                    ))));
                }
                Some(Loaded {
                    name: name.clone(),
                    net,
                })
            }
            None => None,
        };
        let seed = b.seed.unwrap_or_else(rand::random);
        let session = Session::new(env, seed, checkpoint);
        let created = session.created_body();
        let id = Uuid::new_v4().to_string();
        let slot = Arc::new(Slot {
            session: Mutex::new(session),
            last_used: Mutex::new(Instant::now()),
        });
        self.sessions.lock().unwrap().insert(id.clone(), slot);
        Ok(Envelope::new(Kind::Created, Some(id), created))
    }

    fn with_session<T>(&self, sid: &Option<String>, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let id = sid
            .as_deref()
            .ok_or_else(|| SandboxError::invalid("missing session_id", Some("session_id")))?;
        let slot = self
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SandboxError::UnknownSession(id.to_string()))?;
        *slot.last_used.lock().unwrap() = Instant::now();
        let mut session = slot.session.lock().unwrap();
        f(&mut session)
    }

    fn resolve(&self, name: &str) -> Result<PathBuf> {
        let dir = self
            .checkpoint_dir
            .as_ref()
            .ok_or_else(|| SandboxError::invalid("server has no checkpoint directory", Some("checkpoint")))?;
        let rel = Path::new(name);
        if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(SandboxError::invalid(
                format!("invalid checkpoint name `{name}`"),
                Some("checkpoint"),
            ));
        }
        Ok(dir.join(rel))
    }

    fn load_checkpoint(&self, name: &str) -> Result<MlpWeights> {
        let path = self.resolve(name)?;
        if !path.is_file() {
            return Err(SandboxError::invalid(
                format!("no checkpoint named `{name}`"),
                Some("checkpoint"),
            ));
        }
        Ok(load_weights(&path)?)
    }

    /// Every `.aysw` file under the checkpoint directory, by relative name.
    pub fn list_checkpoints(&self) -> Result<Vec<CheckpointInfo>> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(Vec::new());
        };
        let mut files = Vec::new();
        collect_weights(dir, &mut files).map_err(|e| SandboxError::invalid(format!("{}: {e}", dir.display()), None))?;
        files.sort();
        let mut out = Vec::new();
        for path in files {
            let Ok(net) = load_weights(&path) else { continue };
            let name = path
                .strip_prefix(dir)
                .expect("collected under dir")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            let spec = net.spec();
            out.push(CheckpointInfo {
                name,
                head: spec.head.as_str().to_string(),
                input_dim: spec.input_dim,
                observability: env::Observability::from_dim(spec.input_dim).map(|o| o.as_str().to_string()),
            });
        }
        Ok(out)
    }
}

fn collect_weights(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_weights(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "aysw") {
            out.push(path);
        }
    }
    Ok(())
}

/// Parses a request body; an absent body reads as `{}`.
fn body<T: DeserializeOwned>(v: Value) -> Result<T> {
    let v = if v.is_null() {
        Value::Object(Default::default())
    } else {
        v
    };
    serde_json::from_value(v).map_err(|e| SandboxError::invalid(format!("invalid body: {e}"), None))
}

fn parse_action(v: Value) -> Result<PolicyAction> {
    let bad = || SandboxError::invalid(format!("invalid action {v}"), Some("action"));
    match &v {
        Value::Number(n) => {
            let code = n.as_u64().ok_or_else(bad)?;
            PolicyAction::from_index(code as usize).map_err(|e| SandboxError::invalid(e.to_string(), Some("action")))
        }
        Value::String(s) => PolicyAction::from_label(s).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn env_from_overrides(overrides: &BTreeMap<String, Value>) -> Result<EnvConfig> {
    let known = EnvConfig::default().to_kv();
    let mut kv = KvMap::new();
    for (k, v) in overrides {
        if !known.contains(k) || k == "env.seed" {
            return Err(SandboxError::invalid(format!("unknown override `{k}`"), Some(k)));
        }
        let text = match v {
            Value::String(s) => s.clone(),
            Value::Number(_) | Value::Bool(_) => v.to_string(),
            _ => {
                return Err(SandboxError::invalid(
                    format!("override `{k}` must be a scalar"),
                    Some(k),
                ))
            }
        };
        kv.set(k.clone(), text);
    }
    Ok(EnvConfig::from_kv(&kv)?)
}

fn kind_name(k: Kind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
