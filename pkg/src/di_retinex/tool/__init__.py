"""Dataset ingestion, PNG codec and the ``di-retinex`` command line."""
