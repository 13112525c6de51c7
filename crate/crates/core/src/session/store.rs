use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use sha2::{Digest, Sha256};

use super::{
    FocusChange, ImageId, ImageRecord, LogEvent, LogRecord, Message, MessageId, Role, Segment,
    Session, SessionError, SessionHeader, SessionId,
};
use crate::config::ServiceConfig;

struct Entry {
    session: Session,
    log: File,
}

/// File-backed session store: `<root>/sessions/<id>.jsonl` per session and
/// content-addressed PNGs under `<root>/images/`.
///
/// Writes to one session are serialized; different sessions proceed independently.
pub struct SessionStore {
    sessions_dir: PathBuf,
    images_dir: PathBuf,
    open: Mutex<HashMap<SessionId, Arc<Mutex<Entry>>>>,
}

impl SessionStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, SessionError> {
        let root = root.as_ref();
        let sessions_dir = root.join("sessions");
        let images_dir = root.join("images");
        fs::create_dir_all(&sessions_dir)?;
        fs::create_dir_all(&images_dir)?;
        Ok(Self {
            sessions_dir,
            images_dir,
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn images_dir(&self) -> &Path {
        &self.images_dir
    }

    pub fn log_path(&self, id: &SessionId) -> PathBuf {
        self.sessions_dir.join(format!("{id}.jsonl"))
    }

    pub fn create_session(&self, config: &ServiceConfig) -> Result<Session, SessionError> {
        self.create_session_with_id(SessionId::random(), config)
    }

    pub fn create_session_with_id(
        &self,
        id: SessionId,
        config: &ServiceConfig,
    ) -> Result<Session, SessionError> {
        config
            .validate()
            .map_err(|e| SessionError::ConfigInvalid(e.to_string()))?;
        let mut open = self.open.lock().unwrap();
        let path = self.log_path(&id);
        let mut log = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => SessionError::AlreadyExists(id.clone()),
                _ => SessionError::Io(e),
            })?;
        let header = SessionHeader {
            session_id: id.clone(),
            created_at: Utc::now(),
            config: config.clone(),
        };
        write_record(&mut log, LogEvent::Session(header.clone()))?;
        let session = Session::from_header(header);
        open.insert(
            id,
            Arc::new(Mutex::new(Entry {
                session: session.clone(),
                log,
            })),
        );
        Ok(session)
    }

    fn entry(&self, id: &SessionId) -> Result<Arc<Mutex<Entry>>, SessionError> {
        let mut open = self.open.lock().unwrap();
        if let Some(entry) = open.get(id) {
            return Ok(entry.clone());
        }
        let path = self.log_path(id);
        let session = replay(&path, id)?;
        let log = OpenOptions::new().append(true).open(&path)?;
        let entry = Arc::new(Mutex::new(Entry { session, log }));
        open.insert(id.clone(), entry.clone());
        Ok(entry)
    }

    /// Checks, persists, then applies one event.
    fn append(&self, id: &SessionId, event: LogEvent) -> Result<Session, SessionError> {
        let entry = self.entry(id)?;
        let mut entry = entry.lock().unwrap();
        entry.session.check(&event)?;
        write_record(&mut entry.log, event.clone())?;
        entry.session.commit(event);
        Ok(entry.session.clone())
    }

    /// Current in-memory state.
    pub fn get(&self, id: &SessionId) -> Result<Session, SessionError> {
        let entry = self.entry(id)?;
        let session = entry.lock().unwrap().session.clone();
        Ok(session)
    }

    /// Rebuilds the session from its log on disk.
    pub fn load_session(&self, id: &SessionId) -> Result<Session, SessionError> {
        replay(&self.log_path(id), id)
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionId>, SessionError> {
        let mut ids: Vec<SessionId> = fs::read_dir(&self.sessions_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                SessionId::parse(name.strip_suffix(".jsonl")?)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn append_message(
        &self,
        id: &SessionId,
        role: Role,
        segments: Vec<Segment>,
        raw_text: Option<String>,
    ) -> Result<MessageId, SessionError> {
        let entry = self.entry(id)?;
        let message_id = entry.lock().unwrap().session.next_message_id();
        let message = Message {
            message_id: message_id.clone(),
            role,
            segments,
            raw_text,
        };
        self.append(id, LogEvent::Message(message))?;
        Ok(message_id)
    }

    /// Appends a new image, which also becomes the focus. The record's
    /// ordinal and id must be the session's next ones.
    pub fn record_image(&self, id: &SessionId, record: ImageRecord) -> Result<ImageId, SessionError> {
        let image_id = record.image_id.clone();
        {
            let entry = self.entry(id)?;
            let entry = entry.lock().unwrap();
            if entry.session.image(&image_id).is_some() {
                return Err(SessionError::InvalidRecord(format!("image {image_id} already recorded")));
            }
        }
        self.append(id, LogEvent::Image(record))?;
        Ok(image_id)
    }

    /// Replaces the record of an existing image (status transitions).
    pub fn update_image(&self, id: &SessionId, record: ImageRecord) -> Result<(), SessionError> {
        {
            let entry = self.entry(id)?;
            let entry = entry.lock().unwrap();
            if entry.session.image(&record.image_id).is_none() {
                return Err(SessionError::UnknownImage(record.image_id.clone()));
            }
        }
        self.append(id, LogEvent::Image(record)).map(|_| ())
    }

    pub fn set_focus(&self, id: &SessionId, image_id: &ImageId) -> Result<(), SessionError> {
        self.append(
            id,
            LogEvent::Focus(FocusChange {
                image_id: image_id.clone(),
            }),
        )
        .map(|_| ())
    }

    pub fn focused_image(&self, id: &SessionId) -> Result<Option<ImageId>, SessionError> {
        Ok(self.get(id)?.focus)
    }

    pub fn transcript(&self, id: &SessionId) -> Result<Vec<Message>, SessionError> {
        Ok(self.get(id)?.messages)
    }

    /// Stores PNG bytes under their digest and returns the hex digest.
    pub fn put_image_bytes(&self, bytes: &[u8]) -> Result<String, SessionError> {
        let digest = hex::encode(Sha256::digest(bytes));
        let path = self.image_path(&digest);
        if !path.exists() {
            let tmp = self.images_dir.join(format!(".{digest}.{}.tmp", uuid::Uuid::new_v4().simple()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(digest)
    }

    pub fn image_path(&self, digest: &str) -> PathBuf {
        self.images_dir.join(format!("{digest}.png"))
    }

    pub fn read_image_bytes(&self, digest: &str) -> Result<Vec<u8>, SessionError> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(SessionError::InvalidRecord(format!("bad digest {digest:?}")));
        }
        Ok(fs::read(self.image_path(digest))?)
    }

    /// Looks an image up by id in whichever session owns it.
    pub fn find_image(&self, image_id: &ImageId) -> Result<ImageRecord, SessionError> {
        let session = self.get(&image_id.session_id())?;
        session
            .image(image_id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownImage(image_id.clone()))
    }
}

fn write_record(log: &mut File, event: LogEvent) -> Result<(), SessionError> {
    let record = LogRecord {
        ts: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        event,
    };
    let mut line = serde_json::to_vec(&record).map_err(|e| SessionError::InvalidRecord(e.to_string()))?;
    line.push(b'\n');
    // one write per record, so a killed process leaves whole lines behind
    log.write_all(&line)?;
    log.flush()?;
    Ok(())
}

/// Rebuilds a session from its log, rejecting any malformed or inconsistent line.
pub(crate) fn replay(path: &Path, id: &SessionId) -> Result<Session, SessionError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(SessionError::NotFound(id.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let corrupt = |line: usize, reason: String| SessionError::CorruptLog {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut reader = BufReader::new(file);
    let mut session: Option<Session> = None;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            return Err(corrupt(line_no, "truncated record (no line terminator)".into()));
        }
        let record: LogRecord = serde_json::from_slice(&buf[..buf.len() - 1])
            .map_err(|e| corrupt(line_no, e.to_string()))?;
        match (&mut session, record.event) {
            (None, LogEvent::Session(header)) => {
                if &header.session_id != id {
                    return Err(corrupt(line_no, format!("log belongs to session {}", header.session_id)));
                }
                session = Some(Session::from_header(header));
            }
            (None, _) => return Err(corrupt(line_no, "first record is not a session header".into())),
            (Some(s), event) => s.apply(event).map_err(|e| corrupt(line_no, e.to_string()))?,
        }
    }
    session.ok_or_else(|| corrupt(1, "empty log".into()))
}
