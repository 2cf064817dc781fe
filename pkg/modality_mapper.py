import pandas as pd

# Define the modalities and what each block carries
MODALITY_DESCRIPTIONS = {
    "visual": "Image embedding from the visual encoder, optionally PCA-compressed",
    "textual": "Caption embedding, pooled tag vectors and caption statistics",
    "spatial": "Posting time encodings, geo position, account age and location embedding",
    "user": "Follower statistics and user embedding",
    "cross": "Agreement between the visual and textual content",
}


def get_modalities(feature_matrix):
    """Returns the modality blocks present in a feature matrix, in column order."""
    spans = feature_matrix.block_spans
    return sorted(spans, key=lambda name: spans[name][0])


def get_columns_for_modality(feature_matrix, modality):
    """Returns the column names belonging to a modality block."""
    if modality not in feature_matrix.block_spans:
        return []
    start, end = feature_matrix.block_spans[modality]
    return list(feature_matrix.col_names[start:end])


def modality_of_column(column):
    """Block name encoded in a `<block>.<name>` column."""
    return column.split(".", 1)[0]


def calculate_modality_score(importances, modality):
    """Sum of the per-column importances of a modality block."""
    frame = importances[importances["feature"].map(modality_of_column) == modality]
    if frame.empty:
        return 0.0
    return float(frame["importance"].sum())


def get_modality_summary(importances):
    """
    Aggregate per-column importances into one row per modality

    Parameters:
    - importances: DataFrame with columns feature, importance, std

    Returns:
    - DataFrame with modality, importance, column_count, top_feature
    """
    summary = []
    modalities = list(dict.fromkeys(importances["feature"].map(modality_of_column)))
    for modality in modalities:
        block = importances[importances["feature"].map(modality_of_column) == modality]
        top = block.sort_values("importance", ascending=False, kind="mergesort").iloc[0]["feature"]
        summary.append({
            "modality": modality,
            "importance": calculate_modality_score(importances, modality),
            "column_count": len(block),
            "top_feature": top,
        })
    return pd.DataFrame(summary, columns=["modality", "importance", "column_count", "top_feature"])
