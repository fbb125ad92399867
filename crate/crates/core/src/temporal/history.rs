use std::collections::VecDeque;

use crate::bev::BevEmbedding;
use crate::error::{Error, Result};
use crate::real::Real;

/// Identity of one scenario/ego stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub scenario_id: u32,
    pub ego_id: u32,
}

/// Ring buffer of past embeddings for one stream, oldest first.
#[derive(Clone, Debug)]
pub struct HistoryBuffer<F: Real> {
    capacity: usize,
    stream: Option<StreamId>,
    entries: VecDeque<BevEmbedding<F>>,
    pushes: usize,
}

impl<F: Real> HistoryBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            stream: None,
            entries: VecDeque::with_capacity(capacity),
            pushes: 0,
        }
    }

    pub fn for_stream(capacity: usize, stream: StreamId) -> Self {
        Self {
            stream: Some(stream),
            ..Self::new(capacity)
        }
    }

    pub fn stream(&self) -> Option<StreamId> {
        self.stream
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of successful pushes since creation or the last [`HistoryBuffer::clear`].
    pub fn pushes(&self) -> usize {
        self.pushes
    }

    pub fn entries(&self) -> impl Iterator<Item = &BevEmbedding<F>> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.pushes = 0;
    }

    /// Appends an embedding, evicting the oldest entry when full.
    pub fn push(&mut self, emb: BevEmbedding<F>) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if emb.frame_index <= last.frame_index {
                return Err(Error::Argument(format!(
                    "history frame {} does not follow frame {}",
                    emb.frame_index, last.frame_index
                )));
            }
            if emb.shape() != last.shape() {
                return Err(Error::Argument(format!(
                    "history entry shape {:?} differs from {:?}",
                    emb.shape(),
                    last.shape()
                )));
            }
        }
        self.pushes += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(emb);
        Ok(())
    }
}
