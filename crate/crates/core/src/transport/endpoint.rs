use std::collections::VecDeque;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};
use rand::Rng;

use super::frame::{decode_message, encode_message, Message};
use crate::error::{Error, Result};

/// One node's mailbox plus send handles to every mailbox in the mesh.
///
/// Delivery is reliable, exactly-once and FIFO per ordered pair. Messages
/// that arrive before anyone asks for them wait in `pending`, in arrival
/// order.
#[derive(Debug)]
pub struct Endpoint {
    id: usize,
    inbox: Receiver<Vec<u8>>,
    peers: Vec<Sender<Vec<u8>>>,
    pending: VecDeque<Message>,
    timeout: Duration,
    jitter_us: u64,
}

/// A fully connected mesh of `n` endpoints; endpoint `k` has id `k`.
pub fn mesh(n: usize, timeout: Duration) -> Vec<Endpoint> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| Endpoint {
            id,
            inbox,
            peers: senders.clone(),
            pending: VecDeque::new(),
            timeout,
            jitter_us: 0,
        })
        .collect()
}

impl Endpoint {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Number of endpoints in the mesh.
    pub fn size(&self) -> usize {
        self.peers.len()
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Sleep up to `us` microseconds before every send, to shake up thread
    /// interleavings. Results must not depend on it.
    pub fn set_jitter(&mut self, us: u64) {
        self.jitter_us = us;
    }

    pub fn pending(&self) -> &VecDeque<Message> {
        &self.pending
    }

    pub fn send(&self, to: usize, msg: &Message) -> Result<()> {
        let peer = self.peers.get(to).ok_or(Error::IndexOutOfRange {
            index: to,
            len: self.peers.len(),
        })?;
        if self.jitter_us > 0 {
            let us = rand::rng().random_range(0..=self.jitter_us);
            std::thread::sleep(Duration::from_micros(us));
        }
        peer.send(encode_message(msg)?)
            .map_err(|_| Error::ChannelClosed(format!("mailbox of node {to} is gone")))
    }

    /// Moves one frame from the channel into `pending`. Returns whether a
    /// frame arrived; a blocking wait that hits the timeout is an error.
    fn pump(&mut self, block: bool) -> Result<bool> {
        let frame = if block {
            match self.inbox.recv_timeout(self.timeout) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Timeout(format!(
                        "node {} waited {:?} without a message",
                        self.id, self.timeout
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::ChannelClosed(format!("inbox of node {} closed", self.id)))
                }
            }
        } else {
            match self.inbox.try_recv() {
                Ok(f) => f,
                Err(TryRecvError::Empty) => return Ok(false),
                Err(TryRecvError::Disconnected) => {
                    return Err(Error::ChannelClosed(format!("inbox of node {} closed", self.id)))
                }
            }
        };
        self.pending.push_back(decode_message(&frame)?);
        Ok(true)
    }

    /// Moves everything already delivered into `pending` without waiting.
    pub fn drain(&mut self) -> Result<()> {
        while self.pump(false)? {}
        Ok(())
    }

    /// Waits for one more frame (bounded by the timeout).
    pub fn wait(&mut self) -> Result<()> {
        self.pump(true).map(|_| ())
    }

    /// Removes and returns the oldest pending message matching `pred`.
    pub fn take(&mut self, pred: impl Fn(&Message) -> bool) -> Option<Message> {
        let at = self.pending.iter().position(pred)?;
        self.pending.remove(at)
    }

    /// Blocks until a message matching `pred` is available.
    pub fn recv_where(&mut self, pred: impl Fn(&Message) -> bool) -> Result<Message> {
        loop {
            if let Some(m) = self.take(&pred) {
                return Ok(m);
            }
            self.wait()?;
        }
    }

    /// Removes every pending message matching `pred`, oldest first.
    pub(crate) fn take_all(&mut self, pred: impl Fn(&Message) -> bool) -> Vec<Message> {
        let (hit, keep): (VecDeque<_>, VecDeque<_>) = self.pending.drain(..).partition(|m| pred(m));
        self.pending = keep;
        hit.into()
    }
}
