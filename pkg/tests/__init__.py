# Tests package for comove
