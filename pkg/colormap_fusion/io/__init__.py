# IO package