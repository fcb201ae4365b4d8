# Service modules: one per laboratory component, plus the experiment runners.
