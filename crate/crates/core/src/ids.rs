//! Opaque sequential identifiers shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $prefix:literal) => {
        $(#[$m])*
        #[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// A node in the snapshot registry.
    SnapshotId, "s"
);
id_type!(
    /// A memory dump image.
    ImageId, "img"
);
id_type!(TemplateId, "tpl");
id_type!(
    /// An external I/O request tracked by the broker.
    RequestId, "req"
);
