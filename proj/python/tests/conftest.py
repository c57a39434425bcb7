import importlib.util
import os
import pathlib
import sys

# Under ctest the extension lives in the build tree; load it as coflow._coflow
# next to the source package.
ext_dir = os.environ.get("COFLOW_EXTENSION_DIR")
if ext_dir:
    sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1]))
    ext = next(pathlib.Path(ext_dir).glob("_coflow*.so"))
    spec = importlib.util.spec_from_file_location("coflow._coflow", ext)
    module = importlib.util.module_from_spec(spec)
    sys.modules["coflow._coflow"] = module
    spec.loader.exec_module(module)
