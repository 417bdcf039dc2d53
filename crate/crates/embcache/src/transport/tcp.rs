//! Framed TCP transport backend.
//!
//! One connection per worker, thread-per-connection on the server side. The
//! shared [`ServerCore`] is serialized behind a mutex; the dense-reduction
//! round blocks contributing connections on a generation barrier until every
//! worker has contributed, then releases the mean to all of them.

use super::{decode_body, encode, ByteCounter, Endpoint, Message};
use crate::error::{Error, Result};
use crate::server::{HandleOutcome, ServerCore};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

const BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

struct DenseBarrier {
    state: Mutex<BarrierState>,
    cond: Condvar,
}

struct BarrierState {
    generation: u64,
    /// Mean of the generation that just closed, handed to each participant.
    result: Option<(u64, Vec<f32>)>,
    taken: usize,
    expected: usize,
}

impl DenseBarrier {
    fn new(expected: usize) -> Self {
        Self {
            state: Mutex::new(BarrierState {
                generation: 0,
                result: None,
                taken: 0,
                expected,
            }),
            cond: Condvar::new(),
        }
    }

    /// Contribute and block until the round's mean is available.
    fn reduce(&self, core: &Mutex<ServerCore>, worker_id: u32, grads: Vec<f32>) -> Result<Vec<f32>> {
        let mut st = self.state.lock().expect("barrier poisoned");
        let my_gen = st.generation;
        let outcome = core
            .lock()
            .expect("server core poisoned")
            .handle(Message::DenseReduceReq { worker_id, grads })?;
        match outcome {
            HandleOutcome::DenseComplete(mean) => {
                st.generation += 1;
                st.taken = 1;
                let out = mean.clone();
                if st.taken == st.expected {
                    st.result = None;
                } else {
                    st.result = Some((my_gen, mean));
                }
                self.cond.notify_all();
                Ok(out)
            }
            HandleOutcome::DensePending => loop {
                let ready = st
                    .result
                    .as_ref()
                    .is_some_and(|(done_gen, _)| *done_gen == my_gen);
                if ready {
                    st.taken += 1;
                    let (_, mean) = st.result.as_ref().expect("checked above");
                    let out = mean.clone();
                    if st.taken == st.expected {
                        st.result = None;
                    }
                    return Ok(out);
                }
                let (next, timeout) = self
                    .cond
                    .wait_timeout(st, BARRIER_TIMEOUT)
                    .expect("barrier poisoned");
                st = next;
                if timeout.timed_out() {
                    return Err(Error::Transport(format!(
                        "dense barrier timed out waiting for {} contributions",
                        st.expected
                    )));
                }
            },
            HandleOutcome::Reply(_) => unreachable!("dense request cannot yield a direct reply"),
        }
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<Option<Message>> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len == 0 {
        return Err(Error::Frame("frame length must include the type byte".into()));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(Some(decode_body(&body)?))
}

fn serve_connection(
    mut stream: TcpStream,
    core: Arc<Mutex<ServerCore>>,
    barrier: Arc<DenseBarrier>,
) -> Result<()> {
    loop {
        let Some(msg) = read_frame(&mut stream)? else {
            return Ok(()); // client closed
        };
        let resp = match msg {
            Message::DenseReduceReq { worker_id, grads } => Message::DenseReduceResp {
                grads: barrier.reduce(&core, worker_id, grads)?,
            },
            other => match core.lock().expect("server core poisoned").handle(other)? {
                HandleOutcome::Reply(resp) => resp,
                _ => unreachable!("non-dense requests reply immediately"),
            },
        };
        stream.write_all(&encode(&resp))?;
    }
}

/// Handle to a running TCP server. Dropping it stops the accept loop; the
/// server state stays readable for post-run inspection.
pub struct TcpServerHandle {
    addr: SocketAddr,
    core: Arc<Mutex<ServerCore>>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl TcpServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn core(&self) -> Arc<Mutex<ServerCore>> {
        self.core.clone()
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TcpServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind and serve on `addr` (use port 0 for an ephemeral port).
pub fn spawn_server(addr: &str, core: ServerCore) -> Result<TcpServerHandle> {
    let expected = core.reducer.expected();
    let listener = TcpListener::bind(addr)
        .map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    let local = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let core = Arc::new(Mutex::new(core));
    let barrier = Arc::new(DenseBarrier::new(expected));
    let stop = Arc::new(AtomicBool::new(false));

    let accept_core = core.clone();
    let accept_stop = stop.clone();
    let accept_thread = std::thread::spawn(move || {
        let mut conn_threads = Vec::new();
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nodelay(true).ok();
                    stream
                        .set_nonblocking(false)
                        .expect("connection socket mode");
                    let core = accept_core.clone();
                    let barrier = barrier.clone();
                    conn_threads.push(std::thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, core, barrier) {
                            eprintln!("connection handler error: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => {
                    eprintln!("accept error: {e}");
                    break;
                }
            }
        }
        for t in conn_threads {
            let _ = t.join();
        }
    });

    Ok(TcpServerHandle {
        addr: local,
        core,
        stop,
        accept_thread: Some(accept_thread),
    })
}

/// One worker's framed TCP connection.
pub struct TcpEndpoint {
    stream: TcpStream,
    counters: ByteCounter,
}

impl TcpEndpoint {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        Ok(Self {
            stream,
            counters: ByteCounter::default(),
        })
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode(msg);
        self.counters.record_sent(msg, frame.len() as u64);
        self.stream
            .write_all(&frame)
            .map_err(|e| Error::Transport(format!("send: {e}")))
    }

    fn recv(&mut self) -> Result<Message> {
        let mut len_buf = [0u8; 4];
        self.stream
            .read_exact(&mut len_buf)
            .map_err(|e| Error::Transport(format!("recv: {e}")))?;
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut body = vec![0u8; len];
        self.stream
            .read_exact(&mut body)
            .map_err(|e| Error::Transport(format!("recv: {e}")))?;
        let msg = decode_body(&body)?;
        self.counters.record_received(&msg, (4 + len) as u64);
        Ok(msg)
    }

    fn counters(&self) -> ByteCounter {
        self.counters
    }
}
