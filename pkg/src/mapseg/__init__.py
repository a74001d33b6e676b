"""mapseg: weak-supervision semantic segmentation of aerial imagery from online maps.

The toolkit turns vector map data (OSM-style buildings and roads) into pixel
label rasters, trains a small fully convolutional network on them, and runs
label-noise / transfer-learning experiments on synthetic cities.
"""

__version__ = "0.1.0"
