//! In-memory session store with idle-time eviction and a size cap.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::time::Instant;

use catrec::corpus::Utterance;

pub struct Session {
    pub history: Vec<Utterance>,
    pub created_at: u64,
    pub last_active: u64,
}

impl Session {
    pub fn touch(&mut self) {
        self.last_active = unix_now();
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Entry {
    session: Arc<tokio::sync::Mutex<Session>>,
    seen: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreFull;

pub struct SessionStore {
    entries: Mutex<HashMap<String, Entry>>,
    ttl: Duration,
    capacity: usize,
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            ttl,
            capacity,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// A fresh empty session. Expired sessions are dropped before the
    /// capacity check.
    pub fn create(&self) -> Result<String, StoreFull> {
        let now = Instant::now();
        let mut map = self.lock();
        if map.len() >= self.capacity {
            map.retain(|_, e| now.duration_since(e.seen) < self.ttl);
            if map.len() >= self.capacity {
                return Err(StoreFull);
            }
        }
        let t = unix_now();
        loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            if map.contains_key(&id) {
                continue;
            }
            let session = Session {
                history: Vec::new(),
                created_at: t,
                last_active: t,
            };
            map.insert(
                id.clone(),
                Entry {
                    session: Arc::new(tokio::sync::Mutex::new(session)),
                    seen: now,
                },
            );
            return Ok(id);
        }
    }

    /// The live session `id`, refreshing its idle timer.
    pub fn get(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        let now = Instant::now();
        let mut map = self.lock();
        let expired = now.duration_since(map.get(id)?.seen) >= self.ttl;
        if expired {
            map.remove(id);
            return None;
        }
        let e = map.get_mut(id)?;
        e.seen = now;
        Some(e.session.clone())
    }

    pub fn remove(&self, id: &str) -> bool {
        self.lock().remove(id).is_some()
    }

    pub fn evict_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = self.lock();
        let before = map.len();
        map.retain(|_, e| now.duration_since(e.seen) < self.ttl);
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
