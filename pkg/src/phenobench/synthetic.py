"""Synthetic on-disk benchmark inputs with planted gene complexes."""

from pathlib import Path

import numpy as np

from .embedding_store import NEGATIVE_CONTROL, PERTURBATION, EmbeddingTable, save_embeddings


def write_benchmark_fixture(directory, n_genes=60, dim=16, n_controls=80, replicates=3,
                            complex_size=4, seed=0):
    """Embeddings, two relationship files and an arm map under ``directory``.

    Genes in the same complex share a latent direction, so complex pairs are
    recoverable; the second database is a scored copy with decoy pairs.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    genes = [f"G{i:03d}" for i in range(n_genes)]
    centres = rng.standard_normal((n_genes // complex_size + 1, dim)) * 2.0
    meta, vecs = [], []
    for i, g in enumerate(genes):
        for r in range(replicates):
            meta.append((f"W{len(meta):05d}", f"E{r % 2}", f"P{r}", g, PERTURBATION))
            vecs.append(centres[i // complex_size] + rng.standard_normal(dim))
    for c in range(n_controls):
        meta.append((f"W{len(meta):05d}", f"E{c % 2}", "PC", "EMPTY", NEGATIVE_CONTROL))
        vecs.append(rng.standard_normal(dim))
    emb = d / "embeddings.csv"
    save_embeddings(EmbeddingTable.from_arrays(meta, np.array(vecs)), emb)

    complexes = [genes[k:k + complex_size] for k in range(0, n_genes, complex_size)]
    pairs = [(a, b) for cx in complexes for i, a in enumerate(cx) for b in cx[i + 1:]]
    (d / "corum.tsv").write_text(
        "gene_a\tgene_b\n" + "".join(f"{a}\t{b}\n" for a, b in pairs), encoding="utf-8")
    decoys = [(genes[i], genes[(i + 7) % n_genes]) for i in range(0, n_genes, 3)]
    lines = [f"{a}\t{b}\t0.99\n" for a, b in pairs[::2]] + [f"{a}\t{b}\t0.5\n" for a, b in decoys]
    (d / "string.tsv").write_text("gene_a\tgene_b\tscore\n" + "".join(lines), encoding="utf-8")
    (d / "arms.csv").write_text(
        "gene,arm\n" + "".join(f"{g},{i % 5 + 1}p\n" for i, g in enumerate(genes)), encoding="utf-8")
    return {"embeddings": emb, "corum": d / "corum.tsv", "string": d / "string.tsv",
            "arms": d / "arms.csv", "dir": d}
