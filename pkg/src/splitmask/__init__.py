"""SplitMask laboratory."""
