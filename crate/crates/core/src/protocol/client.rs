use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::framing::{read_message, write_message};
use super::{
    AskRequest, AskResponse, Backend, BackendDescriptor, BackendError, Hello, Message, Reply,
    DEFAULT_ASK_TIMEOUT, DEFAULT_MAX_IMAGE_BYTES, PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub connect_timeout: Duration,
    pub handshake_timeout: Duration,
    pub max_image_bytes: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            connect_timeout: Duration::from_secs(3),
            handshake_timeout: DEFAULT_ASK_TIMEOUT,
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
        }
    }
}

type Pending = Arc<Mutex<HashMap<String, Sender<Result<AskResponse, BackendError>>>>>;

/// Client for a backend reachable over TCP.
///
/// One connection is shared by all callers; a reader thread routes each
/// response to the caller waiting on its request id.
pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    writer: Mutex<TcpStream>,
    pending: Pending,
    alive: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
    options: ClientOptions,
}

/// Connects, performs the handshake and returns the backend's descriptor.
pub fn handshake(addr: &str) -> Result<BackendDescriptor, BackendError> {
    RemoteBackend::connect(addr, ClientOptions::default()).map(|b| b.descriptor.clone())
}

impl RemoteBackend {
    pub fn connect(addr: &str, options: ClientOptions) -> Result<RemoteBackend, BackendError> {
        let socket_addr = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Transport(format!("cannot resolve {addr}: {e}")))?
            .next()
            .ok_or_else(|| BackendError::Transport(format!("no address for {addr}")))?;
        let stream = TcpStream::connect_timeout(&socket_addr, options.connect_timeout)
            .map_err(|e| BackendError::Transport(format!("cannot connect to {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        Self::from_stream(stream, options)
    }

    pub fn from_stream(stream: TcpStream, options: ClientOptions) -> Result<RemoteBackend, BackendError> {
        let io_err = |e: std::io::Error| BackendError::Transport(e.to_string());
        let mut writer = stream.try_clone().map_err(io_err)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(io_err)?);

        write_message(
            &mut writer,
            &Message::Hello(Hello {
                protocol_version: PROTOCOL_VERSION.to_string(),
                client: concat!("drivectx/", env!("CARGO_PKG_VERSION")).to_string(),
            }),
        )?;
        stream.set_read_timeout(Some(options.handshake_timeout)).map_err(io_err)?;
        let descriptor = match read_message(&mut reader)? {
            Some(Message::Welcome(d)) => d,
            Some(Message::Error(e)) => {
                return Err(BackendError::Protocol(format!("handshake refused: {}: {}", e.code, e.message)))
            }
            Some(other) => {
                return Err(BackendError::Protocol(format!("unexpected handshake reply: {other:?}")))
            }
            None => return Err(BackendError::Transport("connection closed during handshake".into())),
        };
        descriptor.validate()?;
        stream.set_read_timeout(None).map_err(io_err)?;

        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let alive = Arc::new(AtomicBool::new(true));
        let reader_thread = {
            let pending = Arc::clone(&pending);
            let alive = Arc::clone(&alive);
            std::thread::Builder::new()
                .name("backend-reader".into())
                .spawn(move || route_responses(reader, pending, alive))
                .map_err(io_err)?
        };

        Ok(RemoteBackend {
            descriptor,
            writer: Mutex::new(writer),
            pending,
            alive,
            reader: Some(reader_thread),
            options,
        })
    }

    pub fn is_connected(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }
}

fn route_responses(mut reader: BufReader<TcpStream>, pending: Pending, alive: Arc<AtomicBool>) {
    let reason = loop {
        match read_message(&mut reader) {
            Ok(Some(Message::Answer(resp))) => {
                if let Some(tx) = pending.lock().unwrap().remove(&resp.id) {
                    let _ = tx.send(Ok(resp));
                }
                // Late answers for cancelled requests are dropped.
            }
            Ok(Some(Message::Error(err))) => match err.id {
                Some(id) => {
                    if let Some(tx) = pending.lock().unwrap().remove(&id) {
                        let _ = tx.send(Err(BackendError::Remote { code: err.code, message: err.message }));
                    }
                }
                None => break format!("backend error without request id: {}: {}", err.code, err.message),
            },
            Ok(Some(other)) => break format!("unexpected message from backend: {other:?}"),
            Ok(None) => break "connection closed by backend".to_string(),
            Err(e) => break e.to_string(),
        }
    };
    alive.store(false, Ordering::SeqCst);
    for (_, tx) in pending.lock().unwrap().drain() {
        let _ = tx.send(Err(BackendError::Transport(reason.clone())));
    }
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn ask(&self, request: &AskRequest, timeout: Duration) -> Result<Reply, BackendError> {
        request.validate(self.options.max_image_bytes)?;
        if !self.is_connected() {
            return Err(BackendError::Transport("connection to backend lost".into()));
        }
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.pending.lock().unwrap();
            if pending.contains_key(&request.id) {
                return Err(BackendError::InvalidRequest(format!(
                    "request id {:?} is already in flight",
                    request.id
                )));
            }
            pending.insert(request.id.clone(), tx);
        }
        let started = Instant::now();
        let sent = {
            let mut writer = self.writer.lock().unwrap();
            write_message(&mut *writer, &Message::Ask(request.clone()))
        };
        if let Err(e) = sent {
            self.pending.lock().unwrap().remove(&request.id);
            return Err(e);
        }
        let outcome = rx.recv_timeout(timeout);
        let elapsed = started.elapsed();
        match outcome {
            Ok(Ok(response)) => {
                response.validate_against(request)?;
                Ok(Reply { response, elapsed })
            }
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().unwrap().remove(&request.id);
                Err(BackendError::Timeout { request_id: request.id.clone(), elapsed })
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(BackendError::Transport("response channel closed".into()))
            }
        }
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Ok(writer) = self.writer.lock() {
            let _ = writer.shutdown(Shutdown::Both);
        }
        if let Some(handle) = self.reader.take() {
            let _ = handle.join();
        }
    }
}
