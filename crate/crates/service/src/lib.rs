//! Live annotation over HTTP.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/v1/tasks?limit=n` | open tasks, fewest votes first |
//! | POST | `/api/v1/tasks/{id}/votes` | `{choice, confidence, voter}` |
//! | GET | `/api/v1/experiments` | status of every experiment |
//! | POST | `/api/v1/experiments` | create from a (partial) config |
//! | GET | `/api/v1/experiments/{id}` | status |
//! | GET | `/api/v1/experiments/{id}/curves` | curve rows and summary |
//! | POST | `/api/v1/experiments/{id}/advance` | close the batch and retrain |
//! | GET | `/static/{key}.png` | pair images |

mod error;
mod http;
mod state;

pub use error::{ApiError, FieldError};
pub use http::{router, serve, AppState, ServeOptions};
pub use state::{image_key, ExperimentStatus, Service, ServiceMode, TaskStatus, TaskView};
