"""Jobs package - training stages and experiment runners"""
