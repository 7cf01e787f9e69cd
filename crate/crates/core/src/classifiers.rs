//! Base classifiers: the trait the smoothing machinery queries, a few
//! deterministic built-ins, and a client for classifiers served over a socket.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
#[cfg(unix)]
use std::os::unix::net::UnixStream;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{Token, TokenSequence};

pub type Label = usize;

/// A deterministic map from token sequences to labels in `0..num_classes()`.
///
/// It must be total, including on the empty sequence, and must not change
/// between calls: Monte Carlo estimates are only meaningful for a fixed map.
pub trait BaseClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// One label per input, in order.
    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>>;

    fn classify(&self, x: &TokenSequence) -> Result<Label> {
        let labels = self.classify_batch(std::slice::from_ref(x))?;
        labels
            .into_iter()
            .next()
            .ok_or_else(|| Error::Classifier("classifier returned no label".into()))
    }
}

impl<C: BaseClassifier + ?Sized> BaseClassifier for Box<C> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        (**self).classify_batch(batch)
    }
}

impl<C: BaseClassifier + ?Sized> BaseClassifier for std::sync::Arc<C> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        (**self).classify_batch(batch)
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::invalid("a classifier needs at least one class"));
    }
    Ok(())
}

/// Always returns the same label.
#[derive(Clone, Debug)]
pub struct ConstantClassifier {
    label: Label,
    num_classes: usize,
}

impl ConstantClassifier {
    pub fn new(label: Label, num_classes: usize) -> Result<Self> {
        check_classes(num_classes)?;
        if label >= num_classes {
            return Err(Error::invalid(format!("label {label} out of range for {num_classes} classes")));
        }
        Ok(ConstantClassifier { label, num_classes })
    }
}

impl BaseClassifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        Ok(vec![self.label; batch.len()])
    }
}

/// Bag-of-tokens threshold: `positive` when at least `threshold` tokens of
/// the input belong to the keyword set, `negative` otherwise.
#[derive(Clone, Debug)]
pub struct KeywordClassifier {
    keywords: HashSet<Token>,
    threshold: usize,
    positive: Label,
    negative: Label,
}

impl KeywordClassifier {
    pub fn new(keywords: impl IntoIterator<Item = Token>, threshold: usize) -> Self {
        KeywordClassifier {
            keywords: keywords.into_iter().collect(),
            threshold: threshold.max(1),
            positive: 1,
            negative: 0,
        }
    }

    pub fn with_labels(mut self, positive: Label, negative: Label) -> Self {
        self.positive = positive;
        self.negative = negative;
        self
    }

    fn label(&self, x: &TokenSequence) -> Label {
        let hits = x.tokens().iter().filter(|t| self.keywords.contains(t)).count();
        if hits >= self.threshold {
            self.positive
        } else {
            self.negative
        }
    }
}

impl BaseClassifier for KeywordClassifier {
    fn num_classes(&self) -> usize {
        self.positive.max(self.negative) + 1
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        Ok(batch.iter().map(|x| self.label(x)).collect())
    }
}

/// Stable 64-bit hash of a seed and a token sequence (FNV-1a followed by a
/// splitmix finalizer). Unlike `std`'s hasher it is fixed across runs,
/// platforms and releases.
pub fn sequence_hash(seed: u64, tokens: &[Token]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&seed.to_le_bytes());
    feed(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        feed(&t.to_le_bytes());
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `sequence_hash(seed, x) mod num_classes`: an irregular but reproducible
/// decision surface.
#[derive(Clone, Debug)]
pub struct HashClassifier {
    seed: u64,
    num_classes: usize,
}

impl HashClassifier {
    pub fn new(seed: u64, num_classes: usize) -> Result<Self> {
        check_classes(num_classes)?;
        Ok(HashClassifier { seed, num_classes })
    }
}

impl BaseClassifier for HashClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        Ok(batch
            .iter()
            .map(|x| (sequence_hash(self.seed, x.tokens()) % self.num_classes as u64) as Label)
            .collect())
    }
}

/// Version of the line protocol spoken by [`RemoteClassifier`].
pub const PROTOCOL_VERSION: u64 = 1;

/// Where a remote classifier listens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port` or bare `host:port`.
    Tcp(String),
    /// `unix:///path/to/socket`.
    Unix(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(path) = s.strip_prefix("unix://") {
            if path.is_empty() {
                return Err(Error::invalid("empty unix socket path"));
            }
            return Ok(Endpoint::Unix(path.to_string()));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Endpoint::Tcp(addr.to_string()))
            }
            _ => Err(Error::invalid(format!("endpoint `{s}` is not tcp://host:port or unix:///path"))),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Unix(p) => write!(f, "unix://{p}"),
        }
    }
}

/// Connection settings for [`RemoteClassifier`].
#[derive(Clone, Debug)]
pub struct RemoteOptions {
    /// Largest number of sequences sent in one request.
    pub max_batch: usize,
    /// Read/write timeout per request.
    pub timeout: Duration,
    /// Total attempts per request for transport failures (at least 1).
    pub attempts: u32,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            max_batch: 256,
            timeout: Duration::from_secs(30),
            attempts: 3,
        }
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    id: String,
    sequences: &'a [TokenSequence],
}

#[derive(Deserialize)]
struct ClassifyResponse {
    id: String,
    labels: Option<Vec<i64>>,
    error: Option<String>,
}

#[derive(Deserialize)]
struct InfoResponse {
    num_classes: usize,
    #[serde(default)]
    name: String,
    protocol: u64,
}

enum Stream {
    Tcp(TcpStream),
    #[cfg(unix)]
    Unix(UnixStream),
}

impl Stream {
    fn connect(endpoint: &Endpoint, timeout: Duration) -> io::Result<Self> {
        let stream = match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "address did not resolve"))?;
                let s = TcpStream::connect_timeout(&sock, timeout)?;
                s.set_nodelay(true)?;
                Stream::Tcp(s)
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => Stream::Unix(UnixStream::connect(path)?),
            #[cfg(not(unix))]
            Endpoint::Unix(_) => {
                return Err(io::Error::new(io::ErrorKind::Unsupported, "unix sockets unavailable"));
            }
        };
        stream.set_timeouts(timeout)?;
        Ok(stream)
    }

    fn set_timeouts(&self, timeout: Duration) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))
            }
            #[cfg(unix)]
            Stream::Unix(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))
            }
        }
    }
}

impl io::Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.read(buf),
        }
    }
}

impl io::Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            #[cfg(unix)]
            Stream::Unix(s) => s.flush(),
        }
    }
}

struct Connection {
    reader: BufReader<Stream>,
}

/// Failure of a single exchange, before retry bookkeeping.
enum Exchange {
    /// Worth retrying on a fresh connection.
    Transient(io::Error),
    Fatal(Error),
}

impl From<io::Error> for Exchange {
    fn from(e: io::Error) -> Self {
        Exchange::Transient(e)
    }
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> io::Result<Self> {
        Ok(Connection {
            reader: BufReader::new(Stream::connect(endpoint, timeout)?),
        })
    }

    fn round_trip(&mut self, line: &str) -> std::result::Result<String, Exchange> {
        let stream = self.reader.get_mut();
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(Exchange::Transient(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            )));
        }
        Ok(reply)
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock)
}

/// Proxy for a classifier served over newline-delimited JSON.
///
/// Each request is a single line `{"id": .., "sequences": [[..], ..]}`
/// answered by `{"id": .., "labels": [..]}`. On connect the client sends
/// `{"op":"info"}` and expects `{"num_classes", "name", "protocol"}`.
/// Batches larger than `max_batch` are split; transport failures reconnect and
/// retry. The connection is shared and requests are serialized.
pub struct RemoteClassifier {
    endpoint: Endpoint,
    options: RemoteOptions,
    num_classes: usize,
    name: String,
    conn: Mutex<Option<Connection>>,
    next_id: AtomicU64,
    requests: AtomicU64,
}

impl fmt::Debug for RemoteClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteClassifier")
            .field("endpoint", &self.endpoint)
            .field("name", &self.name)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

impl RemoteClassifier {
    pub fn connect(endpoint: Endpoint, options: RemoteOptions) -> Result<Self> {
        if options.max_batch == 0 {
            return Err(Error::invalid("max_batch must be positive"));
        }
        let attempts = options.attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            match Self::handshake(&endpoint, options.timeout) {
                Ok((conn, info)) => {
                    if info.protocol != PROTOCOL_VERSION {
                        return Err(Error::ProtocolVersion {
                            found: info.protocol,
                            expected: PROTOCOL_VERSION,
                        });
                    }
                    check_classes(info.num_classes)?;
                    return Ok(RemoteClassifier {
                        endpoint,
                        options: RemoteOptions { attempts, ..options },
                        num_classes: info.num_classes,
                        name: info.name,
                        conn: Mutex::new(Some(conn)),
                        next_id: AtomicU64::new(0),
                        requests: AtomicU64::new(0),
                    });
                }
                Err(Exchange::Fatal(e)) => return Err(e),
                Err(Exchange::Transient(e)) => {
                    log::warn!("connecting to {endpoint} (attempt {attempt}/{attempts}): {e}");
                    last = Some(e);
                }
            }
        }
        Err(transport_error(attempts, last))
    }

    fn handshake(endpoint: &Endpoint, timeout: Duration) -> std::result::Result<(Connection, InfoResponse), Exchange> {
        let mut conn = Connection::open(endpoint, timeout)?;
        let reply = conn.round_trip(r#"{"op":"info"}"#)?;
        let info: InfoResponse = serde_json::from_str(reply.trim())
            .map_err(|e| Exchange::Fatal(Error::Protocol(format!("bad info reply: {e}"))))?;
        Ok((conn, info))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Classification requests sent so far (the handshake is not counted).
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn send_chunk(&self, chunk: &[TokenSequence]) -> Result<Vec<Label>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let line = serde_json::to_string(&ClassifyRequest {
            id: id.clone(),
            sequences: chunk,
        })?;
        let attempts = self.options.attempts;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut last = None;
        for attempt in 1..=attempts {
            if guard.is_none() {
                match Connection::open(&self.endpoint, self.options.timeout) {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        log::warn!("reconnecting to {} (attempt {attempt}/{attempts}): {e}", self.endpoint);
                        last = Some(e);
                        continue;
                    }
                }
            }
            let conn = guard.as_mut().expect("connection present");
            self.requests.fetch_add(1, Ordering::Relaxed);
            match conn.round_trip(&line) {
                Ok(reply) => return self.parse_reply(&reply, &id, chunk.len()),
                Err(Exchange::Fatal(e)) => return Err(e),
                Err(Exchange::Transient(e)) => {
                    log::warn!("request {id} to {} (attempt {attempt}/{attempts}): {e}", self.endpoint);
                    *guard = None;
                    last = Some(e);
                }
            }
        }
        Err(transport_error(attempts, last))
    }

    fn parse_reply(&self, reply: &str, id: &str, expected: usize) -> Result<Vec<Label>> {
        let resp: ClassifyResponse =
            serde_json::from_str(reply.trim()).map_err(|e| Error::Protocol(format!("bad reply: {e}")))?;
        if resp.id != id {
            return Err(Error::Protocol(format!("reply id `{}` does not match request `{id}`", resp.id)));
        }
        if let Some(err) = resp.error {
            return Err(Error::Classifier(format!("server error: {err}")));
        }
        let labels = resp
            .labels
            .ok_or_else(|| Error::Protocol("reply carries no labels".into()))?;
        if labels.len() != expected {
            return Err(Error::Protocol(format!(
                "sent {expected} sequences but received {} labels",
                labels.len()
            )));
        }
        labels
            .into_iter()
            .map(|l| {
                if l >= 0 && (l as usize) < self.num_classes {
                    Ok(l as Label)
                } else {
                    Err(Error::Protocol(format!("label {l} outside 0..{}", self.num_classes)))
                }
            })
            .collect()
    }
}

fn transport_error(attempts: u32, last: Option<io::Error>) -> Error {
    match last {
        Some(e) if is_timeout(&e) => Error::Timeout { attempts },
        Some(e) => Error::Transport {
            attempts,
            message: e.to_string(),
        },
        None => Error::Transport {
            attempts,
            message: "no attempt made".into(),
        },
    }
}

impl BaseClassifier for RemoteClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<Label>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.options.max_batch) {
            out.extend(self.send_chunk(chunk)?);
        }
        Ok(out)
    }
}
