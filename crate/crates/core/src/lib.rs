//! Two-step semiparametric estimation of private-value densities in
//! first-price sealed-bid auctions with symmetric independent private values.
//!
//! Bids are inverted into pseudo private values with local polynomial
//! estimates of the bid distribution, and a parametric value model is then
//! fitted to them by GMM. The crate also ships an equilibrium simulator, the
//! fully nonparametric kernel baseline, and reserve price tools.

pub mod data;
pub mod error;
pub mod first_stage;
pub mod gmm;
pub mod gpv;
pub mod kernel;
pub mod numeric;
pub mod policy;
pub mod sim;
pub mod validation;

pub use data::{group_by_bidder_count, load_dataset, save_dataset, validate_dataset, AuctionDataset, AuctionRecord, BidderGroup};
pub use error::{AuctionError, Result};
pub use validation::{Issue, Severity, ValidationReport};
