"""File formats: tensor container, portable images, run manifests."""
