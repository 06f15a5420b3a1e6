pub mod protocol;
pub mod server;
pub mod session;

pub use server::Server;
pub use session::{Copilots, Session};
