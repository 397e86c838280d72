//! Shared trace model and wire formats.
//!
//! Everything that crosses a process boundary in the pipeline is defined
//! here: the RTOS event model, the delta/varint event batch encoding, the
//! tracer <-> gateway frame protocol, the on-bus channel envelope and the
//! `.trcr` recording file format. All functions are pure.

pub mod batch;
pub mod channel;
pub mod error;
pub mod event;
pub mod frame;
pub mod recording;
pub mod varint;

pub use batch::{decode_event_batch, encode_event_batch};
pub use channel::{ChannelMessage, Topics};
pub use error::{DecodeError, EncodeError, RecordingError};
pub use event::{EventKind, TraceEvent};
pub use frame::{decode_frame, encode_frame, Frame, InterruptCode, ResponseStatus, TracerMode};
pub use recording::{read_recording, write_recording, Recording, RecordingHeader};
