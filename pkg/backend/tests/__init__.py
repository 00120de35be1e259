# Test package marker.
