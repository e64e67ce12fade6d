//! 128-bit identifiers, rendered as lowercase hyphenated hex.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Uuid);

        impl $name {
            pub const NIL: $name = $name(Uuid::nil());

            pub fn from_u128(v: u128) -> Self {
                $name(Uuid::from_u128(v))
            }

            pub fn as_u128(&self) -> u128 {
                self.0.as_u128()
            }

            pub fn as_bytes(&self) -> &[u8; 16] {
                self.0.as_bytes()
            }

            /// First eight hex digits, used for display disambiguation.
            pub fn short(&self) -> String {
                self.to_string()[..8].to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&self.0.hyphenated(), f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.short())
            }
        }

        impl FromStr for $name {
            type Err = uuid::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s).map($name)
            }
        }
    };
}

id_type!(
    /// A shared project (one team's dataset).
    ProjectId
);
id_type!(
    /// One client replica; stable for the replica's lifetime.
    DeviceId
);
id_type!(LabelId);
id_type!(SampleId);
id_type!(OpId);
id_type!(
    /// Telemetry event identifier.
    EventId
);

/// Source of fresh identifiers.
///
/// Seeded generators make scripted sessions and fuzz runs reproducible; the
/// unseeded constructor draws from OS entropy.
#[derive(Debug, Clone)]
pub struct IdGen {
    rng: ChaCha8Rng,
}

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        IdGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_entropy() -> Self {
        IdGen {
            rng: ChaCha8Rng::from_os_rng(),
        }
    }

    fn raw(&mut self) -> u128 {
        // Never hand out the nil id.
        loop {
            let v: u128 = self.rng.random();
            if v != 0 {
                return v;
            }
        }
    }

    pub fn label(&mut self) -> LabelId {
        LabelId::from_u128(self.raw())
    }

    pub fn sample(&mut self) -> SampleId {
        SampleId::from_u128(self.raw())
    }

    pub fn op(&mut self) -> OpId {
        OpId::from_u128(self.raw())
    }

    pub fn device(&mut self) -> DeviceId {
        DeviceId::from_u128(self.raw())
    }

    pub fn project(&mut self) -> ProjectId {
        ProjectId::from_u128(self.raw())
    }

    pub fn event(&mut self) -> EventId {
        EventId::from_u128(self.raw())
    }
}
