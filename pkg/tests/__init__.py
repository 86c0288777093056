# pytest suite for the KOVA policy-evaluation library and harness
