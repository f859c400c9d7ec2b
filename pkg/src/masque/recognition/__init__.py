"""Face recognition: toy embedders, verification, identification and a remote client."""
