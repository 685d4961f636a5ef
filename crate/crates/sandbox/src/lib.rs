//! Interactive session service over the AYS environment: create, step, undo
//! and reset episodes, and ask a loaded checkpoint for its preferred action.

pub mod protocol;
pub mod server;
pub mod session;

pub use server::{router, serve};
pub use session::{SandboxError, Session, SessionManager};
