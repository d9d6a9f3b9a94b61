from phenobench.synthetic import write_benchmark_fixture  # noqa: F401
