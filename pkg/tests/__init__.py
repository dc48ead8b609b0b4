# cfpoison tests
