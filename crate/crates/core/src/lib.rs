pub mod corpus;
pub mod curator;
pub mod dataset;
pub mod diagnosis;
pub mod labeler;
