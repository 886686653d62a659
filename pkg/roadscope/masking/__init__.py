"""Road mask rasterization and occlusion."""
