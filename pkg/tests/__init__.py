# spcl-vqa test suite
