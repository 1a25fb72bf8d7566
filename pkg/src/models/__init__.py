# Marks models as a package
