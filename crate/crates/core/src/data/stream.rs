use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{derive, permutation};

/// How classes are partitioned into incremental tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamMode {
    /// Half of the classes in the first task, the other half split evenly
    /// over `tasks` further tasks.
    HalfThenEqual { tasks: usize },
    /// `tasks` tasks of equal size.
    Equal { tasks: usize },
    /// `base` classes first, the rest split evenly over `tasks` further tasks.
    BaseThenEqual { base: usize, tasks: usize },
}

impl StreamMode {
    /// Number of classes in each task, in order.
    pub fn task_sizes(self, num_classes: usize) -> Result<Vec<usize>> {
        let (base, rest, tasks) = match self {
            StreamMode::HalfThenEqual { tasks } => {
                if !num_classes.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "half_then_equal needs an even class count, got {num_classes}"
                    )));
                }
                (num_classes / 2, num_classes / 2, tasks)
            }
            StreamMode::Equal { tasks } => {
                if tasks == 0 || !num_classes.is_multiple_of(tasks) {
                    return Err(Error::Config(format!(
                        "{num_classes} classes cannot be split into {tasks} equal tasks"
                    )));
                }
                return Ok(vec![num_classes / tasks; tasks]);
            }
            StreamMode::BaseThenEqual { base, tasks } => {
                if base == 0 || base > num_classes {
                    return Err(Error::Config(format!(
                        "base task of {base} classes out of {num_classes}"
                    )));
                }
                (base, num_classes - base, tasks)
            }
        };
        if tasks == 0 {
            return Ok(vec![base]);
        }
        if rest % tasks != 0 || rest == 0 {
            return Err(Error::Config(format!(
                "{rest} remaining classes cannot be split into {tasks} equal tasks"
            )));
        }
        let mut sizes = vec![base];
        sizes.extend(std::iter::repeat_n(rest / tasks, tasks));
        Ok(sizes)
    }
}

/// One incremental stage: its classes (original ids) and the train/test
/// samples of exactly those classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    /// Original class ids in arrival order.
    pub class_order: Vec<usize>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }
}

/// Partitions `ds` into tasks. The class order and the stratified
/// train/test split are both fixed by `seed`.
pub fn make_task_stream(
    ds: &LabeledDataset,
    mode: StreamMode,
    test_fraction: f64,
    seed: u64,
) -> Result<TaskStream> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let k = ds.num_classes();
    let sizes = mode.task_sizes(k)?;
    let class_order = permutation(k, &mut derive(seed, 1));

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels().iter().enumerate() {
        per_class[y].push(i);
    }
    let mut split_rng = derive(seed, 2);
    let mut train_idx: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut test_idx: Vec<Vec<usize>> = Vec::with_capacity(k);
    for members in &per_class {
        if members.is_empty() {
            return Err(Error::Config("every class needs at least one sample".into()));
        }
        let order = permutation(members.len(), &mut split_rng);
        let n_test = ((members.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(members.len() - 1);
        let mut shuffled: Vec<usize> = order.iter().map(|&j| members[j]).collect();
        let train = shuffled.split_off(n_test);
        let mut test = shuffled;
        // keep source order inside each split
        test.sort_unstable();
        let mut train = train;
        train.sort_unstable();
        train_idx.push(train);
        test_idx.push(test);
    }

    let mut tasks = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for size in sizes {
        let classes = class_order[offset..offset + size].to_vec();
        offset += size;
        let mut tr: Vec<usize> = classes.iter().flat_map(|&c| train_idx[c].clone()).collect();
        let mut te: Vec<usize> = classes.iter().flat_map(|&c| test_idx[c].clone()).collect();
        tr.sort_unstable();
        te.sort_unstable();
        tasks.push(Task {
            classes,
            train: ds.subset(&tr),
            test: ds.subset(&te),
        });
    }
    Ok(TaskStream { class_order, tasks })
}
