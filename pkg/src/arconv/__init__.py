"""ArConv operator, ArConvNet, kernel-fitting experiments and fundus preprocessing."""
