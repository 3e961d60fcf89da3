//! Interaction ingestion, filtering, chronological sequences, leave-one-out
//! splits, negative sampling and cold/warm item partitions.

mod filter;
mod log;
mod partition;
mod sampling;
mod sequence;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use filter::{filter_dataset, DEFAULT_MIN_ITEM_POPULARITY, DEFAULT_MIN_USER_EVENTS};
pub use log::{
    load_catalog, load_interactions, load_user_item_texts, render_catalog, write_catalog,
    write_interactions, write_user_item_texts, CatalogEntry, Event, InteractionLog, UserItemText,
};
pub use partition::{partition_cold_warm, ColdWarmPartition, DEFAULT_COLD_WARM_FRACTION};
pub use sampling::{build_training_instances, sample_negative, NegativeSampler, TrainingInstance};
pub use sequence::{build_sequences, leave_one_out_split, SplitDataset, UserSequence, UserSplit};

macro_rules! string_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Opaque user identifier.
    UserId
);
string_id!(
    /// Opaque item identifier.
    ItemId
);
