"""Fast-weight metalearning with Hebbian and gradient-mapped binding."""
