use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, MutexGuard};

use crate::ids::RequestId;

use super::space::AddressSpace;
use super::ProcError;

#[derive(Debug, Default)]
struct Lanes {
    next: u64,
    // agent -> broker, in submission order
    requests: VecDeque<(RequestId, Vec<u8>)>,
    // broker -> agent, in completion order
    responses: VecDeque<RequestId>,
    buffered: BTreeMap<RequestId, Vec<u8>>,
}

/// Out-of-process I/O proxy. Its state never appears in a dump or template,
/// so responses that arrive while the agent is frozen survive any restore
/// whose continuation still expects them.
#[derive(Debug, Default)]
pub struct IoBroker {
    lanes: Mutex<Lanes>,
}

impl IoBroker {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Lanes> {
        self.lanes.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Agent side: queues a request and records it in the continuation.
    pub fn submit(&self, space: &mut AddressSpace, payload: Vec<u8>) -> RequestId {
        let mut l = self.lock();
        let id = RequestId(l.next);
        l.next += 1;
        l.requests.push_back((id, payload));
        drop(l);
        space.expect_response(id);
        id
    }

    /// Broker side: answers the oldest pending request. Works regardless of
    /// whether the agent is quiesced.
    pub fn complete_next(&self, respond: impl FnOnce(&[u8]) -> Vec<u8>) -> Option<RequestId> {
        let mut l = self.lock();
        let (id, payload) = l.requests.pop_front()?;
        let resp = respond(&payload);
        l.buffered.insert(id, resp);
        l.responses.push_back(id);
        Some(id)
    }

    pub fn pending(&self) -> usize {
        self.lock().requests.len()
    }

    /// Buffered responses the given continuation is waiting for, in
    /// completion order.
    pub fn poll(&self, space: &AddressSpace) -> Vec<RequestId> {
        let l = self.lock();
        l.responses
            .iter()
            .copied()
            .filter(|id| space.outstanding().contains(id))
            .collect()
    }

    /// Hands a buffered response to the continuation. The broker keeps its
    /// copy so other restored continuations can receive it too.
    pub fn deliver(&self, space: &mut AddressSpace, id: RequestId) -> Result<Vec<u8>, ProcError> {
        if !space.outstanding().contains(&id) {
            return Err(ProcError::DeliverToWrongEpoch(id));
        }
        let resp = self
            .lock()
            .buffered
            .get(&id)
            .cloned()
            .ok_or(ProcError::NotReady(id))?;
        space.take_expected(id);
        Ok(resp)
    }
}
