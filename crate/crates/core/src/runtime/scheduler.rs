//! Round-robin task scheduling on a worker.

use std::collections::VecDeque;

/// The classes of work a worker interleaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Receive,
    Compute,
    Send,
}

const KINDS: [TaskKind; 3] = [TaskKind::Receive, TaskKind::Compute, TaskKind::Send];

/// FIFO queues per task kind, served in a fixed rotation so that no kind
/// starves another: after serving one kind the next lookup starts at the
/// following kind.
#[derive(Debug, Clone)]
pub struct RoundRobin<T> {
    queues: [VecDeque<T>; 3],
    cursor: usize,
}

impl<T> Default for RoundRobin<T> {
    fn default() -> Self {
        Self { queues: [VecDeque::new(), VecDeque::new(), VecDeque::new()], cursor: 0 }
    }
}

impl<T> RoundRobin<T> {
    pub fn push(&mut self, kind: TaskKind, task: T) {
        let i = KINDS.iter().position(|&k| k == kind).expect("known kind");
        self.queues[i].push_back(task);
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }
}

impl<T> Iterator for RoundRobin<T> {
    type Item = (TaskKind, T);

    fn next(&mut self) -> Option<Self::Item> {
        for step in 0..KINDS.len() {
            let i = (self.cursor + step) % KINDS.len();
            if let Some(task) = self.queues[i].pop_front() {
                self.cursor = (i + 1) % KINDS.len();
                return Some((KINDS[i], task));
            }
        }
        None
    }
}

/// Execution order of `tasks` under round-robin service.
pub fn round_robin_schedule<T>(tasks: impl IntoIterator<Item = (TaskKind, T)>) -> Vec<(TaskKind, T)> {
    let mut rr = RoundRobin::default();
    for (kind, task) in tasks {
        rr.push(kind, task);
    }
    rr.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_runs_immediately() {
        assert_eq!(round_robin_schedule([(TaskKind::Compute, 1)]), vec![(TaskKind::Compute, 1)]);
    }

    #[test]
    fn sends_and_receives_alternate() {
        let order = round_robin_schedule([
            (TaskKind::Send, "s1"),
            (TaskKind::Send, "s2"),
            (TaskKind::Receive, "r1"),
            (TaskKind::Receive, "r2"),
        ]);
        let kinds: Vec<TaskKind> = order.iter().map(|(k, _)| *k).collect();
        assert_eq!(kinds, vec![TaskKind::Receive, TaskKind::Send, TaskKind::Receive, TaskKind::Send]);
    }

    #[test]
    fn equal_sends_complete_in_enqueue_order() {
        let order = round_robin_schedule((0..3).map(|i| (TaskKind::Send, i)));
        assert_eq!(order.into_iter().map(|(_, i)| i).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
