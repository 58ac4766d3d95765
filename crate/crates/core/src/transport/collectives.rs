use std::collections::BTreeMap;

use super::endpoint::Endpoint;
use super::frame::{Message, MessageKind};
use crate::error::{Error, Result};
use crate::params::ParamVec;
use crate::protocols::{chunk_bounds, ea_server_apply, ServerState};

/// Collective mean over endpoints `0..p` in 2(p-1) ring phases.
///
/// Chunk `c` is reduced along the ring starting at node `c`, so the result
/// equals [`crate::protocols::ring_order_mean`] bit for bit on every node,
/// whatever the thread schedule.
pub fn ring_allreduce(ep: &mut Endpoint, p: usize, local: &ParamVec, tag: u32) -> Result<ParamVec> {
    let me = ep.id();
    if me >= p || p > ep.size() {
        return Err(Error::IndexOutOfRange { index: me, len: p });
    }
    if p == 1 {
        return Ok(local.clone());
    }
    let dim = local.dim();
    let next = (me + 1) % p;
    let prev = (me + p - 1) % p;
    let mut acc = local.clone().into_inner();
    let chunk = |acc: &[f64], c: usize| {
        let (lo, hi) = chunk_bounds(dim, p, c);
        acc[lo..hi].to_vec()
    };
    let receive = |ep: &mut Endpoint, c: usize| -> Result<(usize, usize, Vec<f64>)> {
        let m = ep.recv_where(|m| m.kind == MessageKind::RingChunk && m.sender() == prev && m.round_tag == tag)?;
        let (lo, hi) = chunk_bounds(dim, p, c);
        if m.payload.len() != hi - lo {
            return Err(Error::DimensionMismatch {
                expected: hi - lo,
                found: m.payload.len(),
            });
        }
        Ok((lo, hi, m.payload))
    };

    // reduce-scatter: afterwards this node holds the full sum of chunk me+1
    for s in 0..p - 1 {
        let send_c = (me + p - s) % p;
        ep.send(next, &Message::new(MessageKind::RingChunk, me, tag, chunk(&acc, send_c)))?;
        let recv_c = (me + 2 * p - 1 - s) % p;
        let (lo, hi, partial) = receive(ep, recv_c)?;
        for (slot, x) in acc[lo..hi].iter_mut().zip(partial) {
            *slot = x + *slot;
        }
    }
    let owned = (me + 1) % p;
    let (lo, hi) = chunk_bounds(dim, p, owned);
    let pf = p as f64;
    acc[lo..hi].iter_mut().for_each(|x| *x /= pf);

    // all-gather
    for s in 0..p - 1 {
        let send_c = (me + 1 + p - s) % p;
        ep.send(next, &Message::new(MessageKind::RingChunk, me, tag, chunk(&acc, send_c)))?;
        let recv_c = (me + p - s) % p;
        let (lo, hi, done) = receive(ep, recv_c)?;
        acc[lo..hi].copy_from_slice(&done);
    }
    ParamVec::new(acc)
}

/// Answers every pending pull request for which `snapshot_for(round_tag)`
/// has a value, oldest first; the rest stay queued. Returns the number
/// answered. A reply to a vanished requester is logged and dropped.
pub fn serve_pull_with<'a>(
    ep: &mut Endpoint,
    snapshot_for: impl Fn(u32) -> Option<&'a ParamVec>,
) -> Result<usize> {
    ep.drain()?;
    let requests = ep.take_all(|m| m.kind == MessageKind::PullRequest && snapshot_for(m.round_tag).is_some());
    for req in &requests {
        let theta = snapshot_for(req.round_tag).expect("filtered above");
        let reply = Message::new(MessageKind::PullReply, ep.id(), req.round_tag, theta.as_slice().to_vec());
        if let Err(e) = ep.send(req.sender(), &reply) {
            log::warn!("dropping pull reply from node {} to node {}: {e}", ep.id(), req.sender());
        }
    }
    Ok(requests.len())
}

/// Answers every pending pull request with `snapshot`.
pub fn serve_pull(ep: &mut Endpoint, snapshot: &ParamVec) -> Result<usize> {
    serve_pull_with(ep, |_| Some(snapshot))
}

/// Round-boundary snapshots a node still owes pull replies for.
#[derive(Debug, Default)]
pub struct SnapshotBook {
    entries: BTreeMap<u32, (ParamVec, usize)>,
}

impl SnapshotBook {
    /// Keeps `theta` until `owed` requests tagged `tag` have been answered.
    pub fn insert(&mut self, tag: u32, theta: ParamVec, owed: usize) {
        if owed > 0 {
            self.entries.insert(tag, (theta, owed));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Answers pending requests whose round snapshot is in `book`, retiring
/// snapshots once every owed reply is sent. Requests for rounds this node
/// has not reached stay queued.
pub fn serve_pull_book(ep: &mut Endpoint, book: &mut SnapshotBook) -> Result<usize> {
    ep.drain()?;
    let requests = ep.take_all(|m| m.kind == MessageKind::PullRequest && book.entries.contains_key(&m.round_tag));
    for req in &requests {
        let (theta, owed) = book.entries.get_mut(&req.round_tag).expect("filtered above");
        let reply = Message::new(MessageKind::PullReply, ep.id(), req.round_tag, theta.as_slice().to_vec());
        if let Err(e) = ep.send(req.sender(), &reply) {
            log::warn!("dropping pull reply from node {} to node {}: {e}", ep.id(), req.sender());
        }
        *owed -= 1;
        if *owed == 0 {
            book.entries.remove(&req.round_tag);
        }
    }
    Ok(requests.len())
}

/// Asks `target` for its round-`tag` parameters, serving incoming pulls while
/// waiting so that cycles of pullers cannot deadlock.
pub fn request_pull(ep: &mut Endpoint, target: usize, tag: u32, book: &mut SnapshotBook) -> Result<ParamVec> {
    ep.send(target, &Message::new(MessageKind::PullRequest, ep.id(), tag, Vec::new()))?;
    loop {
        serve_pull_book(ep, book)?;
        if let Some(reply) =
            ep.take(|m| m.kind == MessageKind::PullReply && m.sender() == target && m.round_tag == tag)
        {
            return ParamVec::new(reply.payload);
        }
        ep.wait()?;
    }
}

/// Fire-and-forget delivery of `theta` to `target`'s mailbox.
pub fn push_param(ep: &Endpoint, target: usize, theta: &ParamVec, tag: u32) -> Result<()> {
    if target == ep.id() {
        return Err(Error::ProtocolViolation(format!("node {target} pushes to itself")));
    }
    ep.send(target, &Message::new(MessageKind::ParamPush, ep.id(), tag, theta.as_slice().to_vec()))
}

/// Waits for exactly `expected` round-`tag` pushes and returns them ordered
/// by sender id.
pub fn collect_pushes(ep: &mut Endpoint, tag: u32, expected: usize) -> Result<Vec<(usize, ParamVec)>> {
    let mut got = Vec::with_capacity(expected);
    while got.len() < expected {
        let m = ep.recv_where(|m| m.kind == MessageKind::ParamPush && m.round_tag == tag)?;
        got.push((m.sender(), ParamVec::new(m.payload)?));
    }
    got.sort_by_key(|(k, _)| *k);
    Ok(got)
}

/// Serial elastic-averaging server: applies updates one at a time, answers
/// center requests with the center as of dequeue, and returns once each of
/// `clients` senders has sent a `Barrier`.
pub fn ea_server_loop(ep: &mut Endpoint, mut server: ServerState, clients: usize) -> Result<ServerState> {
    let mut finished = 0;
    while finished < clients {
        let m = ep.recv_where(|_| true)?;
        match m.kind {
            MessageKind::EaCenter if m.payload.is_empty() => {
                let reply = Message::new(
                    MessageKind::EaCenter,
                    ep.id(),
                    m.round_tag,
                    server.theta_center.as_slice().to_vec(),
                );
                if let Err(e) = ep.send(m.sender(), &reply) {
                    log::warn!("dropping center reply to node {}: {e}", m.sender());
                }
            }
            MessageKind::EaUpdate => match ParamVec::new(m.payload) {
                Ok(update) => server = ea_server_apply(server, &update)?,
                Err(e) => log::warn!("skipping malformed update from node {}: {e}", m.sender),
            },
            MessageKind::Barrier => finished += 1,
            other => log::warn!("elastic server ignores {other:?} from node {}", m.sender),
        }
    }
    Ok(server)
}

/// Client half of one elastic exchange: fetch the center.
pub fn ea_fetch_center(ep: &mut Endpoint, server: usize, tag: u32) -> Result<ParamVec> {
    ep.send(server, &Message::new(MessageKind::EaCenter, ep.id(), tag, Vec::new()))?;
    let m = ep.recv_where(|m| m.kind == MessageKind::EaCenter && m.sender() == server && !m.payload.is_empty())?;
    ParamVec::new(m.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::ring_order_mean;
    use crate::transport::endpoint::mesh;
    use std::time::Duration;

    fn run_ring(inputs: Vec<ParamVec>, jitter: u64) -> Vec<ParamVec> {
        let p = inputs.len();
        let eps = mesh(p, Duration::from_secs(10));
        std::thread::scope(|s| {
            let handles: Vec<_> = eps
                .into_iter()
                .zip(&inputs)
                .map(|(mut ep, x)| {
                    ep.set_jitter(jitter);
                    s.spawn(move || ring_allreduce(&mut ep, p, x, 0).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn ring_examples() {
        let out = run_ring(
            vec![ParamVec::new(vec![1.0, 2.0]).unwrap(), ParamVec::new(vec![3.0, 4.0]).unwrap()],
            0,
        );
        for o in out {
            assert_eq!(o.as_slice(), &[2.0, 3.0]);
        }
        let solo = ParamVec::new(vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(run_ring(vec![solo.clone()], 0), vec![solo]);
    }

    #[test]
    fn ring_matches_ring_order_mean_bitwise() {
        let inputs: Vec<ParamVec> = (0..5)
            .map(|k| ParamVec::new((0..11).map(|i| ((k * 31 + i * 7) % 13) as f64 / 3.0 - 1.7).collect()).unwrap())
            .collect();
        let oracle = ring_order_mean(&inputs).unwrap();
        for o in run_ring(inputs, 50) {
            assert_eq!(o, oracle);
        }
    }

    #[test]
    fn pull_service_examples() {
        let mut eps = mesh(3, Duration::from_millis(500));
        let snap = ParamVec::new(vec![4.0, 5.0]).unwrap();
        assert_eq!(serve_pull(&mut eps[0], &snap).unwrap(), 0);
        for k in [1usize, 2] {
            eps[k].send(0, &Message::new(MessageKind::PullRequest, k, 9, vec![])).unwrap();
        }
        assert_eq!(serve_pull(&mut eps[0], &snap).unwrap(), 2);
        for k in [1usize, 2] {
            let r = eps[k].recv_where(|m| m.kind == MessageKind::PullReply).unwrap();
            assert_eq!(r.payload, vec![4.0, 5.0]);
            assert_eq!(r.round_tag, 9);
        }
    }

    #[test]
    fn book_defers_future_rounds_and_retires_paid_ones() {
        let mut eps = mesh(3, Duration::from_millis(500));
        let mut book = SnapshotBook::default();
        eps[1].send(0, &Message::new(MessageKind::PullRequest, 1, 0, vec![])).unwrap();
        eps[2].send(0, &Message::new(MessageKind::PullRequest, 2, 1, vec![])).unwrap();
        book.insert(0, ParamVec::scalar(1.0), 1);
        assert_eq!(serve_pull_book(&mut eps[0], &mut book).unwrap(), 1);
        assert!(book.is_empty());
        assert_eq!(eps[0].pending().len(), 1);
        book.insert(1, ParamVec::scalar(2.0), 1);
        assert_eq!(serve_pull_book(&mut eps[0], &mut book).unwrap(), 1);
        let r = eps[2].recv_where(|m| m.kind == MessageKind::PullReply).unwrap();
        assert_eq!(r.payload, vec![2.0]);
    }

    #[test]
    fn pushes_arrive_exactly_once() {
        let mut eps = mesh(3, Duration::from_millis(500));
        let x = ParamVec::scalar(1.0);
        push_param(&eps[2], 0, &ParamVec::scalar(2.0), 4).unwrap();
        push_param(&eps[1], 0, &x, 4).unwrap();
        assert!(push_param(&eps[1], 1, &x, 4).is_err());
        let got = collect_pushes(&mut eps[0], 4, 2).unwrap();
        assert_eq!(got.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![1, 2]);
        assert!(collect_pushes(&mut eps[0], 4, 0).unwrap().is_empty());
        assert!(eps[0].pending().is_empty());
    }

    #[test]
    fn elastic_server_examples() {
        let mut eps = mesh(3, Duration::from_secs(5));
        let mut srv_ep = eps.pop().unwrap();
        let (a, b) = (eps.remove(0), eps.remove(0));
        let server = std::thread::scope(|s| {
            let h = s.spawn(move || ea_server_loop(&mut srv_ep, ServerState::new(ParamVec::scalar(0.0)), 2));
            let mut a = a;
            let center = ea_fetch_center(&mut a, 2, 0).unwrap();
            assert_eq!(center.as_slice(), &[0.0]);
            a.send(2, &Message::new(MessageKind::EaUpdate, 0, 0, vec![0.25])).unwrap();
            b.send(2, &Message::new(MessageKind::EaUpdate, 1, 0, vec![-0.25])).unwrap();
            b.send(2, &Message::new(MessageKind::RingChunk, 1, 0, vec![])).unwrap();
            a.send(2, &Message::new(MessageKind::Barrier, 0, 0, vec![])).unwrap();
            b.send(2, &Message::new(MessageKind::Barrier, 1, 0, vec![])).unwrap();
            h.join().unwrap().unwrap()
        });
        assert_eq!(server.theta_center.as_slice(), &[0.0]);
        assert_eq!(server.updates_applied, 2);
    }
}
