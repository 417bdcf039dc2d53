//! Deterministic in-process transport backend.
//!
//! All workers and the server live in one thread; each request is delivered
//! instantly under the scheduler-controlled global order. Messages are still
//! encoded and decoded through the wire codec, so byte counters match the TCP
//! backend exactly and every run exercises the real frame format.

use super::{decode, encode, ByteCounter, Endpoint, Message};
use crate::error::{Error, Result};
use crate::server::{HandleOutcome, ServerCore};
use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

/// Shared single-process network: the server core plus per-worker response
/// queues (FIFO per connection, like TCP).
pub struct SimNet {
    core: ServerCore,
    pending: Vec<VecDeque<Vec<u8>>>,
    dense_waiters: Vec<usize>,
}

impl SimNet {
    pub fn new(core: ServerCore, workers: usize) -> Rc<RefCell<Self>> {
        Rc::new(RefCell::new(Self {
            core,
            pending: (0..workers).map(|_| VecDeque::new()).collect(),
            dense_waiters: Vec::new(),
        }))
    }

    pub fn core(&self) -> &ServerCore {
        &self.core
    }

    fn deliver(&mut self, worker: usize, frame: &[u8]) -> Result<()> {
        // Decode exactly what came off the wire; the server never sees the
        // caller's in-memory message.
        let (msg, used) = decode(frame)?;
        debug_assert_eq!(used, frame.len());
        if let Message::DenseReduceReq { worker_id, .. } = &msg {
            debug_assert_eq!(*worker_id as usize, worker);
        }
        match self.core.handle(msg)? {
            HandleOutcome::Reply(resp) => {
                self.pending[worker].push_back(encode(&resp));
            }
            HandleOutcome::DensePending => {
                self.dense_waiters.push(worker);
            }
            HandleOutcome::DenseComplete(mean) => {
                self.dense_waiters.push(worker);
                let resp = encode(&Message::DenseReduceResp { grads: mean });
                for w in self.dense_waiters.drain(..) {
                    self.pending[w].push_back(resp.clone());
                }
            }
        }
        Ok(())
    }
}

/// One worker's endpoint into the simulated network.
pub struct SimEndpoint {
    net: Rc<RefCell<SimNet>>,
    worker: usize,
    counters: ByteCounter,
}

impl SimEndpoint {
    pub fn new(net: Rc<RefCell<SimNet>>, worker: usize) -> Self {
        Self {
            net,
            worker,
            counters: ByteCounter::default(),
        }
    }
}

impl Endpoint for SimEndpoint {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode(msg);
        self.counters.record_sent(msg, frame.len() as u64);
        self.net.borrow_mut().deliver(self.worker, &frame)
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self
            .net
            .borrow_mut()
            .pending
            .get_mut(self.worker)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| {
                Error::Transport(format!(
                    "worker {} has no pending response (recv before send, or dense round incomplete)",
                    self.worker
                ))
            })?;
        let (msg, _) = decode(&frame)?;
        self.counters.record_received(&msg, frame.len() as u64);
        Ok(msg)
    }

    fn counters(&self) -> ByteCounter {
        self.counters
    }
}
