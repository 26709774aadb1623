//! In-memory restoration sessions with LRU eviction and a time-to-live.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use lmdir_core::priors::PriorBundle;
use lmdir_core::TensorImage;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Auto,
    Guided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub input_image_id: String,
    pub instruction: Option<String>,
    pub mode: Mode,
    pub output_image_id: String,
    pub timestamp: DateTime<Utc>,
}

/// A chain of restorations starting from one upload. Each step consumes the
/// previous step's output.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub steps: Vec<Step>,
    pub current: TensorImage,
    pub current_id: String,
    /// Priors of the uploaded image, reused by every step.
    pub bundle: Arc<PriorBundle>,
    images: ImageMap,
}

type ImageMap = Arc<Mutex<HashMap<String, Arc<Vec<u8>>>>>;

impl Session {
    pub fn new(upload: TensorImage, bundle: Arc<PriorBundle>) -> lmdir_core::Result<Self> {
        let mut id = [0u8; 16];
        rand::rng().fill_bytes(&mut id);
        let current_id = upload.content_id();
        let png = Arc::new(upload.to_png_bytes()?);
        Ok(Self {
            id: hex::encode(id),
            steps: Vec::new(),
            images: Arc::new(Mutex::new(HashMap::from([(current_id.clone(), png)]))),
            current: upload,
            current_id,
            bundle,
        })
    }

    /// Appends a step whose input is the current image and makes `output`
    /// current.
    pub fn push(&mut self, output: TensorImage, mode: Mode, instruction: Option<String>) -> lmdir_core::Result<&Step> {
        let output_id = output.content_id();
        let png = output.to_png_bytes()?;
        self.images.lock().expect("image map").entry(output_id.clone()).or_insert_with(|| Arc::new(png));
        self.steps.push(Step {
            input_image_id: self.current_id.clone(),
            instruction,
            mode,
            output_image_id: output_id.clone(),
            timestamp: Utc::now(),
        });
        self.current = output;
        self.current_id = output_id;
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn image(&self, image_id: &str) -> Option<Arc<Vec<u8>>> {
        self.images.lock().expect("image map").get(image_id).cloned()
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    images: ImageMap,
    last_used: Instant,
}

/// Session map behind a single lock. Each session has its own lock, so
/// steps within a session are serialized while sessions proceed
/// independently.
pub struct SessionStore {
    entries: Mutex<HashMap<String, Entry>>,
    capacity: usize,
    ttl: Duration,
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_TTL)
    }
}

impl SessionStore {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self { entries: Mutex::new(HashMap::new()), capacity, ttl }
    }

    fn expire(&self, map: &mut HashMap<String, Entry>, now: Instant) {
        map.retain(|_, e| now.duration_since(e.last_used) < self.ttl);
    }

    pub fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let now = Instant::now();
        let mut map = self.entries.lock().expect("session map");
        self.expire(&mut map, now);
        while map.len() >= self.capacity {
            let oldest = map.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone()).expect("non-empty");
            map.remove(&oldest);
        }
        let id = session.id.clone();
        let images = session.images.clone();
        let session = Arc::new(Mutex::new(session));
        map.insert(id, Entry { session: session.clone(), images, last_used: now });
        session
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        let now = Instant::now();
        let mut map = self.entries.lock().expect("session map");
        self.expire(&mut map, now);
        map.get_mut(id).map(|e| {
            e.last_used = now;
            e.session.clone()
        })
    }

    pub fn len(&self) -> usize {
        let mut map = self.entries.lock().expect("session map");
        self.expire(&mut map, Instant::now());
        map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// PNG bytes of an image held by any live session. Does not wait for
    /// restorations in progress.
    pub fn image(&self, image_id: &str) -> Option<Arc<Vec<u8>>> {
        let mut map = self.entries.lock().expect("session map");
        self.expire(&mut map, Instant::now());
        map.values().find_map(|e| e.images.lock().expect("image map").get(image_id).cloned())
    }
}
