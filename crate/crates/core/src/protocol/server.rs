use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::framing::{read_frame, write_message};
use super::{check_version, Backend, BackendError, ErrorMessage, Message, DEFAULT_MAX_IMAGE_BYTES};

/// Server-side ceiling on a single request; clients apply their own, usually
/// much tighter, timeout.
const SERVER_ASK_TIMEOUT: Duration = Duration::from_secs(120);

fn error_message(id: Option<String>, code: &str, message: impl Into<String>) -> Message {
    Message::Error(ErrorMessage { id, code: code.to_string(), message: message.into() })
}

fn error_code(err: &BackendError) -> &'static str {
    match err {
        BackendError::InvalidRequest(_) => "invalid_request",
        BackendError::PayloadTooLarge { .. } => "payload_too_large",
        BackendError::Unsupported(_) => "unsupported",
        BackendError::MissingGroundTruth(_) => "missing_ground_truth",
        BackendError::Timeout { .. } => "timeout",
        _ => "backend_failure",
    }
}

/// Serves one connection until the peer disconnects. Requests are handled
/// sequentially; undecodable messages get an error reply and the connection
/// stays open.
pub fn serve_connection(stream: TcpStream, backend: &dyn Backend) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let send = |writer: &mut TcpStream, msg: &Message| {
        write_message(writer, msg).map_err(|e| io::Error::new(io::ErrorKind::BrokenPipe, e.to_string()))
    };
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(body)) => body,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // Cannot resynchronise after a bogus length prefix.
                let _ = send(&mut writer, &error_message(None, "frame_too_large", e.to_string()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let reply = match Message::from_bytes(&body) {
            Err(e) => error_message(None, "malformed", e.to_string()),
            Ok(Message::Hello(hello)) => match check_version(&hello.protocol_version) {
                Ok(()) => Message::Welcome(backend.descriptor().clone()),
                Err(e) => error_message(None, "version_mismatch", e.to_string()),
            },
            Ok(Message::Ask(request)) => {
                match request
                    .validate(DEFAULT_MAX_IMAGE_BYTES)
                    .and_then(|_| backend.ask(&request, SERVER_ASK_TIMEOUT))
                {
                    Ok(reply) => Message::Answer(reply.response),
                    Err(e) => error_message(Some(request.id.clone()), error_code(&e), e.to_string()),
                }
            }
            Ok(other) => error_message(None, "unexpected_message", format!("cannot handle {other:?}")),
        };
        send(&mut writer, &reply)?;
    }
}

/// A TCP listener serving any [`Backend`], one thread per connection.
pub struct BackendServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl BackendServer {
    pub fn spawn(backend: Arc<dyn Backend>, bind: &str) -> io::Result<BackendServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_thread = {
            let stop = Arc::clone(&stop);
            std::thread::Builder::new().name("backend-accept".into()).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    stream.set_nodelay(true).ok();
                    let backend = Arc::clone(&backend);
                    std::thread::spawn(move || {
                        let _ = serve_connection(stream, backend.as_ref());
                    });
                }
            })?
        };
        Ok(BackendServer { addr, stop, accept_thread: Some(accept_thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.addr)
    }

    /// Blocks until the accept loop exits (only after [`BackendServer::shutdown`]).
    pub fn join(mut self) {
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
