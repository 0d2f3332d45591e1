"""Output helpers (CSV, Excel workbooks, ordered thread pools) shared by the experiment runners."""
