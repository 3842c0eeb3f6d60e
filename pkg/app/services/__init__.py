# Pipeline services: video I/O, LBP features, ensemble, fusion, metrics, synthetic fixtures
